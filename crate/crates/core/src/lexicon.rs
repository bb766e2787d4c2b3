//! Small built-in vocabulary of drawable subjects: their kind, reference size
//! in a 1024×1024 frame, and the parts they are usually split into.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubjectKind {
    Human,
    Animal,
    Object,
}

#[derive(Debug, Clone, Copy)]
pub struct LexiconEntry {
    pub noun: &'static str,
    pub plural: &'static str,
    pub kind: SubjectKind,
    /// Width and height in a 1024×1024 frame.
    pub reference_size: (u32, u32),
    /// Part nouns, ordered head-to-tail or top-to-bottom.
    pub parts: &'static [&'static str],
}

const fn human(noun: &'static str, plural: &'static str, w: u32, h: u32, outfit: &'static [&'static str]) -> LexiconEntry {
    LexiconEntry { noun, plural, kind: SubjectKind::Human, reference_size: (w, h), parts: outfit }
}

const fn animal(noun: &'static str, plural: &'static str, w: u32, h: u32, parts: &'static [&'static str]) -> LexiconEntry {
    LexiconEntry { noun, plural, kind: SubjectKind::Animal, reference_size: (w, h), parts }
}

const fn object(noun: &'static str, plural: &'static str, w: u32, h: u32, parts: &'static [&'static str]) -> LexiconEntry {
    LexiconEntry { noun, plural, kind: SubjectKind::Object, reference_size: (w, h), parts }
}

const DRESSED: &[&str] = &["hair", "face", "dress"];
const SUITED: &[&str] = &["hair", "face", "shirt", "trousers"];
const ROBED: &[&str] = &["hair", "face", "robe"];
const QUADRUPED: &[&str] = &["head", "torso", "tail"];
const BIRD: &[&str] = &["head", "body", "wings"];

pub const LEXICON: &[LexiconEntry] = &[
    human("woman", "women", 350, 600, DRESSED),
    human("girl", "girls", 300, 520, DRESSED),
    human("princess", "princesses", 350, 600, DRESSED),
    human("queen", "queens", 350, 600, DRESSED),
    human("man", "men", 370, 620, SUITED),
    human("boy", "boys", 310, 540, SUITED),
    human("farmer", "farmers", 360, 610, SUITED),
    human("chef", "chefs", 360, 610, SUITED),
    human("prince", "princes", 360, 610, SUITED),
    human("knight", "knights", 380, 620, SUITED),
    human("child", "children", 290, 500, SUITED),
    human("king", "kings", 370, 620, ROBED),
    human("wizard", "wizards", 360, 610, ROBED),
    human("witch", "witches", 350, 600, ROBED),
    animal("dog", "dogs", 320, 300, QUADRUPED),
    animal("cat", "cats", 300, 280, QUADRUPED),
    animal("rabbit", "rabbits", 260, 260, QUADRUPED),
    animal("fox", "foxes", 320, 280, QUADRUPED),
    animal("horse", "horses", 460, 420, QUADRUPED),
    animal("elephant", "elephants", 480, 420, &["head", "trunk", "torso", "legs"]),
    animal("bear", "bears", 400, 380, QUADRUPED),
    animal("lion", "lions", 420, 340, QUADRUPED),
    animal("tiger", "tigers", 420, 320, QUADRUPED),
    animal("mouse", "mice", 240, 220, QUADRUPED),
    animal("cow", "cows", 440, 360, QUADRUPED),
    animal("sheep", "sheep", 360, 300, QUADRUPED),
    animal("pig", "pigs", 340, 280, QUADRUPED),
    animal("deer", "deer", 380, 400, QUADRUPED),
    animal("panda", "pandas", 380, 360, QUADRUPED),
    animal("monkey", "monkeys", 300, 340, QUADRUPED),
    animal("bird", "birds", 260, 240, BIRD),
    animal("duck", "ducks", 270, 250, BIRD),
    animal("owl", "owls", 260, 300, BIRD),
    object("house", "houses", 400, 300, &["roof", "windows", "door"]),
    object("castle", "castles", 440, 420, &["towers", "walls", "gate"]),
    object("car", "cars", 440, 260, &["roof", "windows", "wheels"]),
    object("tree", "trees", 300, 500, &["foliage", "branches", "trunk"]),
    object("boat", "boats", 440, 300, &["sail", "mast", "hull"]),
    object("table", "tables", 420, 280, &["tabletop", "drawer", "legs"]),
    object("chair", "chairs", 280, 400, &["backrest", "seat", "legs"]),
    object("lamp", "lamps", 260, 420, &["lampshade", "stem", "base"]),
    object("robot", "robots", 320, 520, &["antenna", "head", "chassis"]),
    object("bicycle", "bicycles", 440, 300, &["handlebar", "frame", "wheels"]),
    object("cake", "cakes", 320, 300, &["candles", "frosting", "layers"]),
    object("umbrella", "umbrellas", 360, 400, &["canopy", "ribs", "handle"]),
    object("bench", "benches", 440, 260, &["backrest", "seat", "legs"]),
];

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase)
}

pub fn lookup(noun: &str) -> Option<&'static LexiconEntry> {
    let noun = noun.to_lowercase();
    LEXICON.iter().find(|e| e.noun == noun || e.plural == noun)
}

/// First known noun in the naming segment of `caption` (the text before any comma).
pub fn classify(caption: &str) -> Option<&'static LexiconEntry> {
    let naming = caption.split(',').next().unwrap_or_default();
    let found: Vec<&LexiconEntry> = words(naming).filter_map(|w| lookup(&w)).collect();
    // "princess dress" style captions name the owner last; prefer the last noun.
    found.last().copied()
}
