//! Agents against recorded transcripts.

use std::sync::Arc;

use autostudio_core::agents::{AgentError, ScriptedMock, Template, Transcript, TranscriptEntry};
use autostudio_core::drawer::ToyDrawer;
use autostudio_core::engine::{Engine, EngineConfig, EngineError, LayoutOrigin, Session, TurnRequest};
use autostudio_core::layout::FrameSize;

fn config() -> EngineConfig {
    EngineConfig { seed: 5, frame: FrameSize::new(256, 256), ..Default::default() }
}

fn with_backend(mock: ScriptedMock) -> Engine {
    Engine::new(Arc::new(mock), Arc::new(ToyDrawer::default()))
}

const PROMPT: &str = "a boy flies a kite on a hill";

/// Runs one turn with the synthesizer and turns its agent calls into a transcript.
fn recorded() -> (Transcript, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::create("rec", config(), dir.path()).unwrap();
    let t = with_backend(ScriptedMock::synthesizing()).run_turn(&mut s, &TurnRequest::generate(PROMPT)).unwrap();
    let mut transcript = Transcript::default();
    for call in &t.agent_calls {
        transcript.entries.push(TranscriptEntry::new(call.template, call.input.clone(), call.response.clone()));
    }
    (transcript, std::fs::read(dir.path().join("turn_1/image.png")).unwrap())
}

#[test]
fn recorded_transcripts_replay_without_the_synthesizer() {
    let (transcript, image) = recorded();
    assert!(transcript.entries.iter().any(|e| e.template == Template::Supervisor));
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("transcript.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&transcript).unwrap()).unwrap();

    let strict = ScriptedMock::from_file(&path).unwrap().strict();
    let dir = tmp.path().join("s");
    std::fs::create_dir(&dir).unwrap();
    let mut s = Session::create("replayed", config(), &dir).unwrap();
    with_backend(strict).run_turn(&mut s, &TurnRequest::generate(PROMPT)).unwrap();
    assert_eq!(std::fs::read(dir.join("turn_1/image.png")).unwrap(), image);

    let strict = ScriptedMock::from_file(&path).unwrap().strict();
    let err = with_backend(strict).run_turn(&mut s, &TurnRequest::generate("a ship at sea")).unwrap_err();
    assert!(matches!(err, EngineError::Agent(AgentError::BackendUnavailable(_))), "{err}");
    assert_eq!(s.turns.len(), 1);
}

#[test]
fn scripted_supervisor_advice_triggers_a_revision() {
    let (mut transcript, _) = recorded();
    let sup = transcript.entries.iter_mut().find(|e| e.template == Template::Supervisor).unwrap();
    sup.response = "<output><advice>move \"1\" to the left</advice></output>".into();
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::create("advised", config(), dir.path()).unwrap();
    let mock = ScriptedMock::from_transcript(transcript).unwrap();
    let t = with_backend(mock).run_turn(&mut s, &TurnRequest::generate(PROMPT)).unwrap();
    assert_eq!(t.advice.len(), 1);
    assert!(!t.advice[0].advice.compliant);
    let layouts = t.agent_calls.iter().filter(|c| c.template == Template::Layout).count();
    assert_eq!(layouts, 2, "the layout agent runs again with the advice");
    let revision = t.agent_calls.iter().rfind(|c| c.template == Template::Layout).unwrap();
    assert!(revision.input.contains("to the left"), "{}", revision.input);
}

#[test]
fn best_effort_mode_falls_back_when_the_agents_fail() {
    let dir = tempfile::tempdir().unwrap();
    let strict_cfg = config();
    let mut s = Session::create("strict", strict_cfg, dir.path()).unwrap();
    let offline = || with_backend(ScriptedMock::from_transcript(Transcript::default()).unwrap().strict());
    assert!(matches!(offline().run_turn(&mut s, &TurnRequest::generate(PROMPT)), Err(EngineError::Agent(_))));
    assert_eq!(s.failures().unwrap().len(), 1);

    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::create("lenient", EngineConfig { strict: false, ..config() }, dir.path()).unwrap();
    let t = offline().run_turn(&mut s, &TurnRequest::generate(PROMPT)).unwrap();
    assert_eq!(t.layout_origin, LayoutOrigin::Fallback);
    assert!(!t.fallbacks.is_empty());
    assert!(t.violations.is_empty());
    assert!(dir.path().join(&t.image).is_file());
}
