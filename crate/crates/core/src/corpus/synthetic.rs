use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WordKind {
    Compound,
    Loanword,
    Idiom,
}

impl WordKind {
    pub const ALL: [WordKind; 3] = [WordKind::Compound, WordKind::Loanword, WordKind::Idiom];
}

impl fmt::Display for WordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Compound => "compound",
            Self::Loanword => "loanword",
            Self::Idiom => "idiom",
        })
    }
}

impl std::str::FromStr for WordKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s.trim())
            .ok_or_else(|| Error::Eval(format!("unknown word type `{s}`; expected compound, loanword or idiom")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LexWord {
    pub text: String,
    pub kind: WordKind,
    /// Slot class the word fills.
    pub class: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Piece {
    Lit(String),
    Slot(String),
}

/// A sentence pattern; `[class]` marks a slot, everything else is literal.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub pieces: Vec<Piece>,
    pub weight: f64,
}

impl Template {
    pub fn parse(pattern: &str, weight: f64) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut rest = pattern;
        while !rest.is_empty() {
            match rest.find('[') {
                Some(0) => {
                    let end = rest
                        .find(']')
                        .ok_or_else(|| Error::Corpus(format!("unclosed slot in `{pattern}`")))?;
                    let class = &rest[1..end];
                    if class.is_empty() {
                        return Err(Error::Corpus(format!("empty slot in `{pattern}`")));
                    }
                    pieces.push(Piece::Slot(class.to_string()));
                    rest = &rest[end + 1..];
                }
                Some(i) => {
                    pieces.push(Piece::Lit(rest[..i].to_string()));
                    rest = &rest[i..];
                }
                None => {
                    pieces.push(Piece::Lit(rest.to_string()));
                    rest = "";
                }
            }
        }
        Ok(Self { pieces, weight })
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot(c) => Some(c.as_str()),
            Piece::Lit(_) => None,
        })
    }

    fn literal_chars(&self) -> impl Iterator<Item = char> + '_ {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Lit(s) => Some(s.chars()),
                Piece::Slot(_) => None,
            })
            .flatten()
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.pieces {
            match p {
                Piece::Lit(s) => f.write_str(s)?,
                Piece::Slot(c) => write!(f, "[{c}]")?,
            }
        }
        Ok(())
    }
}

/// One word occurrence in a generated corpus; offsets count characters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotation {
    pub start: usize,
    pub len: usize,
    pub word: usize,
    pub kind: WordKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub text: String,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLexicon {
    pub inventory: Vec<char>,
    pub words: Vec<LexWord>,
    pub templates: Vec<Template>,
}

const POOL: &str = "山水火木金土石田花草鸟鱼马牛羊虫云雨风雪星月日光天地江河湖海林森竹米麦豆茶酒盐油糖衣布丝皮毛骨肉血心手足头眼耳口鼻牙发身门窗墙屋房桥路车船刀弓箭网笔纸书画歌舞琴棋乐钟鼓灯烟尘沙泥冰霜露雷电春夏秋冬东西南北早晚红黄蓝绿白黑紫青灰高低长短新旧冷热甜苦酸辣香臭软硬快慢远近多少上下左右前后内外开关出入来去走跑飞游坐站睡醒吃喝看听读写想爱恨笑哭唱跳买卖借还送收拿放推拉打洗扫种养病医药针兵将官民商农工匠师徒王侯帝妃臣奴仆客主宾朋友亲邻村城镇乡国州县省区街巷园场厂店铺楼阁寺庙塔殿宫府院堂";
const FRAME: &str = "我你他她在有了的是。，那个说也很这相信走过来";

/// Shuffled content characters, disjoint from the template frame characters.
fn char_pool(seed: u64) -> Vec<char> {
    let mut pool: Vec<char> = Vec::new();
    for c in POOL.chars() {
        if !FRAME.contains(c) && !pool.contains(&c) {
            pool.push(c);
        }
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pool
}

struct Builder {
    pool: std::vec::IntoIter<char>,
    words: Vec<LexWord>,
    templates: Vec<Template>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            pool: char_pool(seed).into_iter(),
            words: Vec::new(),
            templates: Vec::new(),
        }
    }

    fn fresh(&mut self, n: usize) -> String {
        (0..n).map(|_| self.pool.next().expect("character pool exhausted")).collect()
    }

    fn word(&mut self, text: String, kind: WordKind, class: &str) {
        self.words.push(LexWord {
            text,
            kind,
            class: class.to_string(),
        });
    }

    fn template(&mut self, pattern: &str, weight: f64) {
        self.templates.push(Template::parse(pattern, weight).expect("builtin template"));
    }

    fn finish(self) -> SyntheticLexicon {
        let mut lex = SyntheticLexicon {
            inventory: Vec::new(),
            words: self.words,
            templates: self.templates,
        };
        lex.inventory = lex.used_chars();
        lex.validate().expect("builtin lexicon is valid");
        lex
    }
}

impl SyntheticLexicon {
    /// Fifty words over a small compositional grammar: compounds built
    /// from a shared set of root characters, loanword-like words and
    /// idiom-like words whose characters are exclusive to them. Words are
    /// split over four topics and every slot of a sentence draws from the
    /// same topic, so a word's identity shapes what follows it.
    pub fn standard(seed: u64) -> Self {
        const TOPICS: usize = 4;
        let mut b = Builder::new(seed);
        let roots: Vec<char> = b.fresh(10).chars().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut pairs = Vec::new();
        while pairs.len() < 24 {
            let (x, y) = (rng.random_range(0..roots.len()), rng.random_range(0..roots.len()));
            if x != y && !pairs.contains(&(x, y)) {
                pairs.push((x, y));
            }
        }
        for (i, (x, y)) in pairs.into_iter().enumerate() {
            b.word([roots[x], roots[y]].iter().collect(), WordKind::Compound, &format!("noun{}", i % TOPICS));
        }
        for i in 0..12 {
            let w = b.fresh(2 + i % 2);
            b.word(w, WordKind::Loanword, &format!("noun{}", i % TOPICS));
        }
        for i in 0..14 {
            let w = b.fresh(4);
            b.word(w, WordKind::Idiom, &format!("idiom{}", i % TOPICS));
        }
        for t in 0..TOPICS {
            let w = 1.0 / TOPICS as f64;
            b.template(&format!("[noun{t}]是[noun{t}]。"), 2.0 * w);
            b.template(&format!("我有[noun{t}]。"), 1.0 * w);
            b.template(&format!("你的[noun{t}]在那个[noun{t}]。"), 1.5 * w);
            b.template(&format!("[idiom{t}]，[noun{t}]也很[idiom{t}]，[noun{t}]。"), 1.5 * w);
            b.template(&format!("他说[idiom{t}]，[noun{t}]。"), 1.0 * w);
            b.template(&format!("她的[noun{t}]了[idiom{t}]，[noun{t}]。"), 1.0 * w);
        }
        b.finish()
    }

    /// Topic index of a word built by [`standard`](Self::standard), read
    /// from the trailing digit of its class.
    pub fn topic_of(&self, word: usize) -> Option<u32> {
        self.words[word].class.chars().last()?.to_digit(10)
    }

    /// Two disjoint topic clusters with head characters `heads().0` (A) and
    /// `heads().1` (B). Each head prefixes compounds of its own cluster;
    /// the two-character word head A + head B is followed by either cluster.
    pub fn two_topic(seed: u64) -> Self {
        let mut b = Builder::new(seed);
        let heads = b.fresh(2);
        let (ha, hb) = {
            let mut it = heads.chars();
            (it.next().unwrap(), it.next().unwrap())
        };
        let topic_a = b.fresh(6);
        let topic_b = b.fresh(6);
        for c in topic_a.chars() {
            b.word(format!("{ha}{c}"), WordKind::Compound, "headA");
        }
        for c in topic_b.chars() {
            b.word(format!("{hb}{c}"), WordKind::Compound, "headB");
        }
        let ta: Vec<char> = topic_a.chars().collect();
        let tb: Vec<char> = topic_b.chars().collect();
        for i in 0..ta.len() {
            b.word(format!("{}{}", ta[i], ta[(i + 1) % ta.len()]), WordKind::Compound, "topA");
            b.word(format!("{}{}", tb[i], tb[(i + 1) % tb.len()]), WordKind::Compound, "topB");
        }
        b.word(format!("{ha}{hb}"), WordKind::Compound, "pair");
        b.template("[headA]的[topA]。", 2.0);
        b.template("[headB]的[topB]。", 2.0);
        b.template("[topA]是[topA]。", 1.0);
        b.template("[topB]是[topB]。", 1.0);
        b.template("[pair]的[topA]。", 1.0);
        b.template("[pair]的[topB]。", 1.0);
        b.finish()
    }

    /// Occupation words whose following pronoun is skewed: `male` words are
    /// followed by 他 nine times in ten, `female` words by 她, `neutral` evenly.
    pub fn gendered(seed: u64) -> Self {
        let mut b = Builder::new(seed);
        for (class, n) in [("male", 5), ("female", 5), ("neutral", 4)] {
            for _ in 0..n {
                let w = b.fresh(2);
                b.word(w, WordKind::Compound, class);
            }
        }
        for _ in 0..6 {
            let w = b.fresh(2);
            b.word(w, WordKind::Compound, "thing");
        }
        for (class, he) in [("male", 0.9), ("female", 0.1), ("neutral", 0.5)] {
            for frame in [format!("那个[{class}]说，"), format!("这个[{class}]相信"), format!("[{class}]走过来，")] {
                b.template(&format!("{frame}他有[thing]。"), he);
                b.template(&format!("{frame}她有[thing]。"), 1.0 - he);
            }
        }
        b.template("他是[male]。", 1.0);
        b.template("她是[female]。", 1.0);
        b.template("我有[thing]，你也有[thing]。", 1.0);
        b.finish()
    }

    /// Characters used by words and templates, in first-use order.
    fn used_chars(&self) -> Vec<char> {
        let mut out: Vec<char> = Vec::new();
        let all = self
            .words
            .iter()
            .flat_map(|w| w.text.chars())
            .chain(self.templates.iter().flat_map(|t| t.literal_chars().collect::<Vec<_>>()));
        for c in all {
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Corpus(m));
        if self.templates.is_empty() {
            return fail("lexicon has no templates".into());
        }
        let inv: std::collections::HashSet<char> = self.inventory.iter().copied().collect();
        for c in self.used_chars() {
            if !inv.contains(&c) {
                return fail(format!("character {c:?} missing from inventory"));
            }
        }
        for (i, w) in self.words.iter().enumerate() {
            let n = w.text.chars().count();
            let ok = match w.kind {
                WordKind::Compound => n == 2,
                WordKind::Idiom => n == 4,
                WordKind::Loanword => (2..=3).contains(&n),
            };
            if !ok {
                return fail(format!("{} `{}` has {n} characters", w.kind, w.text));
            }
            if w.kind == WordKind::Loanword {
                for c in w.text.chars() {
                    if self.words.iter().enumerate().any(|(j, o)| j != i && o.text.contains(c)) {
                        return fail(format!("loanword `{}` shares {c:?} with another word", w.text));
                    }
                }
            }
        }
        for t in &self.templates {
            if !(t.weight > 0.0 && t.weight.is_finite()) {
                return fail(format!("template `{t}` has weight {}", t.weight));
            }
            for class in t.slots() {
                if !self.words.iter().any(|w| w.class == class) {
                    return fail(format!("slot class `{class}` has no words"));
                }
            }
        }
        Ok(())
    }

    pub fn words_of(&self, class: &str) -> Vec<&LexWord> {
        self.words.iter().filter(|w| w.class == class).collect()
    }

    /// Words whose characters occur in no other word.
    pub fn exclusive_words(&self) -> Vec<usize> {
        (0..self.words.len())
            .filter(|&i| {
                self.words[i].text.chars().all(|c| {
                    self.words
                        .iter()
                        .enumerate()
                        .all(|(j, o)| j == i || !o.text.contains(c))
                })
            })
            .collect()
    }

    fn class_index(&self) -> HashMap<&str, Vec<usize>> {
        let mut m: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, w) in self.words.iter().enumerate() {
            m.entry(w.class.as_str()).or_default().push(i);
        }
        m
    }

    /// Samples `num_sentences` sentences. Deterministic under `seed`.
    pub fn generate(&self, num_sentences: usize, seed: u64) -> Result<SyntheticCorpus> {
        self.validate()?;
        let classes = self.class_index();
        let pick = WeightedIndex::new(self.templates.iter().map(|t| t.weight))
            .map_err(|e| Error::Corpus(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text = String::new();
        let mut annotations = Vec::new();
        let mut pos = 0usize;
        for _ in 0..num_sentences {
            let t = &self.templates[pick.sample(&mut rng)];
            for piece in &t.pieces {
                match piece {
                    Piece::Lit(s) => {
                        text.push_str(s);
                        pos += s.chars().count();
                    }
                    Piece::Slot(c) => {
                        let members = &classes[c.as_str()];
                        let word = members[rng.random_range(0..members.len())];
                        let w = &self.words[word];
                        let len = w.text.chars().count();
                        annotations.push(Annotation {
                            start: pos,
                            len,
                            word,
                            kind: w.kind,
                        });
                        text.push_str(&w.text);
                        pos += len;
                    }
                }
            }
        }
        Ok(SyntheticCorpus { text, annotations })
    }

    /// Expected per-sentence counts of characters (`Left`) and of segments,
    /// where a segment is either a literal character or a whole word.
    fn expected_counts(&self) -> (BTreeMap<char, f64>, BTreeMap<Segment, f64>) {
        let classes = self.class_index();
        let total: f64 = self.templates.iter().map(|t| t.weight).sum();
        let mut chars = BTreeMap::new();
        let mut segs = BTreeMap::new();
        for t in &self.templates {
            let p = t.weight / total;
            for piece in &t.pieces {
                match piece {
                    Piece::Lit(s) => {
                        for c in s.chars() {
                            *chars.entry(c).or_insert(0.0) += p;
                            *segs.entry(Segment::Lit(c)).or_insert(0.0) += p;
                        }
                    }
                    Piece::Slot(class) => {
                        let members = &classes[class.as_str()];
                        let q = p / members.len() as f64;
                        for &w in members {
                            for c in self.words[w].text.chars() {
                                *chars.entry(c).or_insert(0.0) += q;
                            }
                            *segs.entry(Segment::Word(w)).or_insert(0.0) += q;
                        }
                    }
                }
            }
        }
        (chars, segs)
    }

    /// Character distribution implied by the template and slot frequencies.
    pub fn expected_char_distribution(&self) -> BTreeMap<char, f64> {
        let (mut chars, _) = self.expected_counts();
        let z: f64 = chars.values().sum();
        chars.values_mut().for_each(|v| *v /= z);
        chars
    }

    /// Expected characters per sentence.
    pub fn mean_sentence_chars(&self) -> f64 {
        self.expected_counts().0.values().sum()
    }

    /// Entropy in nats per character of a unigram model over segments
    /// (whole words and literal template characters).
    pub fn unigram_entropy_bound(&self) -> f64 {
        let (chars, segs) = self.expected_counts();
        let n_chars: f64 = chars.values().sum();
        let n_segs: f64 = segs.values().sum();
        let h: f64 = segs
            .values()
            .map(|&c| {
                let p = c / n_segs;
                -p * p.ln()
            })
            .sum();
        h * n_segs / n_chars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Segment {
    Lit(char),
    Word(usize),
}

/// Empirical character unigram entropy of `text` in nats.
pub fn char_unigram_entropy(text: &str) -> f64 {
    let mut counts: HashMap<char, usize> = HashMap::new();
    let mut n = 0usize;
    for c in text.chars() {
        *counts.entry(c).or_insert(0) += 1;
        n += 1;
    }
    counts
        .values()
        .map(|&k| {
            let p = k as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}
