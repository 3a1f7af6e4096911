//! Prompt templates, the closed-world tokenizer, special-token registration
//! and assembly of token sequences with loss masks and image slots.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::dataset::{PhrasePool, COMMAND_PREFIXES};
use crate::error::{Error, Result};
use crate::imgedit::OpKind;

const DEFAULT_TEMPLATES: &str = include_str!("../assets/templates.txt");

pub const IMG1_MARKER: &str = "[IMG1]";
pub const IMG2_MARKER: &str = "[IMG2]";
pub const COMMAND_MARKER: &str = "[COMMAND]";
pub const BREAK_TOKEN: &str = "<break>";
pub const IMG1_TAG: &str = "<img1>";
pub const IMG2_TAG: &str = "<img2>";

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Reserved entries, always atomic and always at the start of the vocabulary.
pub const RESERVED: [&str; 6] = [PAD, UNK, BOS, EOS, IMG1_MARKER, IMG2_MARKER];

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateSet {
    WithCommand,
    WithoutCommand,
}

impl TemplateSet {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateSet::WithCommand => "with_command",
            TemplateSet::WithoutCommand => "without_command",
        }
    }
}

impl FromStr for TemplateSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_command" => Ok(TemplateSet::WithCommand),
            "without_command" => Ok(TemplateSet::WithoutCommand),
            other => Err(Error::Template(format!("unknown template set `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pub id: u8,
    pub set: TemplateSet,
    pub body: String,
    pub images_at_start: bool,
}

/// How rendered prompts mark entity boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PromptStyle {
    #[default]
    Plain,
    /// `<break>` between every pair of adjacent entities (image, text, command).
    Break,
}

impl PromptStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptStyle::Plain => "plain",
            PromptStyle::Break => "break",
        }
    }
}

impl FromStr for PromptStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(PromptStyle::Plain),
            "break" => Ok(PromptStyle::Break),
            other => Err(Error::Config(format!("unknown prompt style `{other}`"))),
        }
    }
}

/// Both template sets.
#[derive(Clone, Debug)]
pub struct PromptSet {
    templates: Vec<PromptTemplate>,
}

impl PromptSet {
    pub fn builtin() -> &'static PromptSet {
        use std::sync::OnceLock;
        static SET: OnceLock<PromptSet> = OnceLock::new();
        SET.get_or_init(|| PromptSet::parse(DEFAULT_TEMPLATES).expect("builtin template asset is valid"))
    }

    /// Parses `set|id|images_at_start|body` lines and checks the template invariants.
    pub fn parse(text: &str) -> Result<Self> {
        let mut templates = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| Error::Template(format!("line {}: {m}", i + 1));
            let mut fields = line.splitn(4, '|');
            let (Some(set), Some(id), Some(at_start), Some(body)) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad("expected set|id|images_at_start|body"));
            };
            let t = PromptTemplate {
                set: set.parse()?,
                id: id.parse().map_err(|_| bad("bad id"))?,
                images_at_start: at_start.parse().map_err(|_| bad("bad images_at_start"))?,
                body: body.to_string(),
            };
            validate_template(&t).map_err(|e| bad(&e))?;
            templates.push(t);
        }
        for set in [TemplateSet::WithCommand, TemplateSet::WithoutCommand] {
            let members: Vec<&PromptTemplate> = templates.iter().filter(|t| t.set == set).collect();
            let ids: BTreeSet<u8> = members.iter().map(|t| t.id).collect();
            if members.len() != 8 || ids != (1..=8).collect() {
                return Err(Error::Template(format!(
                    "{} must hold templates 1..=8 exactly once",
                    set.as_str()
                )));
            }
            let at_start = members.iter().filter(|t| t.images_at_start).count();
            if at_start != 4 {
                return Err(Error::Template(format!(
                    "{} has {at_start} images-at-start templates, need 4",
                    set.as_str()
                )));
            }
        }
        Ok(PromptSet { templates })
    }

    pub fn templates(&self, set: TemplateSet) -> Vec<&PromptTemplate> {
        let mut out: Vec<&PromptTemplate> = self.templates.iter().filter(|t| t.set == set).collect();
        out.sort_by_key(|t| t.id);
        out
    }

    pub fn all(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn get(&self, set: TemplateSet, id: u8) -> Option<&PromptTemplate> {
        self.templates.iter().find(|t| t.set == set && t.id == id)
    }

    /// Uniformly picks a template from the set implied by `command` and renders it.
    pub fn select_and_render(
        &self,
        command: Option<&str>,
        style: PromptStyle,
        rng: &mut impl Rng,
    ) -> (String, u8) {
        let set = if command.is_some() {
            TemplateSet::WithCommand
        } else {
            TemplateSet::WithoutCommand
        };
        let id = rng.random_range(1..=8u8);
        let template = self.get(set, id).expect("both sets hold ids 1..=8");
        (render_template(template, command, style), id)
    }
}

/// The 8 built-in templates of one set.
pub fn builtin_templates(set: TemplateSet) -> Vec<PromptTemplate> {
    PromptSet::builtin().templates(set).into_iter().cloned().collect()
}

fn validate_template(t: &PromptTemplate) -> std::result::Result<(), String> {
    for marker in [IMG1_MARKER, IMG2_MARKER] {
        if t.body.matches(marker).count() != 1 {
            return Err(format!("{marker} must appear exactly once"));
        }
    }
    let commands = t.body.matches(COMMAND_MARKER).count();
    let want = usize::from(t.set == TemplateSet::WithCommand);
    if commands != want {
        return Err(format!("{COMMAND_MARKER} appears {commands} times, expected {want}"));
    }
    let starts = t.body.starts_with(&format!("{IMG1_MARKER} {IMG2_MARKER}"));
    if starts != t.images_at_start {
        return Err("images_at_start flag disagrees with the body".into());
    }
    Ok(())
}

enum Piece<'a> {
    Text(&'a str),
    Image(u8),
    Command,
}

fn split_entities(body: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = body;
    loop {
        let next = [(IMG1_MARKER, 1u8), (IMG2_MARKER, 2), (COMMAND_MARKER, 0)]
            .into_iter()
            .filter_map(|(m, tag)| rest.find(m).map(|pos| (pos, m, tag)))
            .min_by_key(|(pos, _, _)| *pos);
        let Some((pos, marker, tag)) = next else {
            if !rest.trim().is_empty() {
                out.push(Piece::Text(rest.trim()));
            }
            return out;
        };
        if !rest[..pos].trim().is_empty() {
            out.push(Piece::Text(rest[..pos].trim()));
        }
        out.push(if tag == 0 { Piece::Command } else { Piece::Image(tag) });
        rest = &rest[pos + marker.len()..];
    }
}

/// Fills `[COMMAND]`, prefixes each image marker with its textual tag and,
/// in `Break` style, separates entities with `<break>`. Image markers remain
/// in the text for [`assemble`].
pub fn render_template(t: &PromptTemplate, command: Option<&str>, style: PromptStyle) -> String {
    let pieces = split_entities(&t.body);
    let render = |p: &Piece| match p {
        Piece::Text(s) => s.to_string(),
        Piece::Image(1) => format!("{IMG1_TAG} {IMG1_MARKER}"),
        Piece::Image(_) => format!("{IMG2_TAG} {IMG2_MARKER}"),
        Piece::Command => command.unwrap_or_default().to_string(),
    };
    let sep = match style {
        PromptStyle::Plain => " ".to_string(),
        PromptStyle::Break => format!(" {BREAK_TOKEN} "),
    };
    pieces.iter().map(render).collect::<Vec<_>>().join(&sep)
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '\''
}

/// Splits text that contains no atomic tokens: words start with a letter and
/// run over letters, digits and apostrophes; every other non-space character,
/// digits included, is a token of its own.
fn split_plain(text: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len() && is_word_char(chars[i]) {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
}

/// Closed vocabulary with dense ids; reserved and registered special tokens are atomic.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    special: BTreeSet<TokenId>,
}

/// For a newly registered special token: the ids its text used to tokenize into.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecialInit {
    pub token: String,
    pub id: TokenId,
    pub source_ids: Vec<TokenId>,
}

impl TokenVocab {
    /// Reserved entries followed by the sorted word list of the closed world.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut sorted: BTreeSet<String> = BTreeSet::new();
        for w in words {
            let mut pieces = Vec::new();
            split_plain(w, &mut pieces);
            sorted.extend(pieces);
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(sorted.into_iter().filter(|t| !RESERVED.contains(&t.as_str())));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        TokenVocab {
            tokens,
            index,
            special: BTreeSet::new(),
        }
    }

    /// Vocabulary covering the built-in templates, phrase pools, command
    /// prefixes, the answer grammar and the image/break tags.
    pub fn builtin() -> Self {
        let prompts = PromptSet::builtin();
        let mut words: Vec<String> = prompts
            .all()
            .iter()
            .map(|t| {
                t.body
                    .replace(IMG1_MARKER, "")
                    .replace(IMG2_MARKER, "")
                    .replace(COMMAND_MARKER, "")
            })
            .collect();
        words.extend(PhrasePool::builtin().all_phrases().map(str::to_string));
        words.extend(COMMAND_PREFIXES.iter().map(|s| s.to_string()));
        words.push("The edit applied with value. The edits applied were: , -0123456789".into());
        words.extend(OpKind::ALL.iter().map(|k| k.name().to_string()));
        words.extend([IMG1_TAG, IMG2_TAG, BREAK_TOKEN].map(String::from));
        TokenVocab::from_words(words.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    fn reserved_id(&self, token: &str) -> TokenId {
        self.index[token]
    }

    pub fn pad(&self) -> TokenId {
        self.reserved_id(PAD)
    }
    pub fn unk(&self) -> TokenId {
        self.reserved_id(UNK)
    }
    pub fn bos(&self) -> TokenId {
        self.reserved_id(BOS)
    }
    pub fn eos(&self) -> TokenId {
        self.reserved_id(EOS)
    }
    pub fn img1(&self) -> TokenId {
        self.reserved_id(IMG1_MARKER)
    }
    pub fn img2(&self) -> TokenId {
        self.reserved_id(IMG2_MARKER)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special.contains(&id)
    }

    pub fn special_names(&self) -> Vec<&str> {
        self.special.iter().map(|&i| self.token(i)).collect()
    }

    /// Ids of the digit tokens `0`..=`9`.
    pub fn digit_ids(&self) -> [TokenId; 10] {
        std::array::from_fn(|d| self.id(&d.to_string()).expect("digits are in every vocabulary"))
    }

    /// Atomic strings, longest first so overlapping names resolve greedily.
    fn atomic(&self) -> Vec<(&str, TokenId)> {
        let mut out: Vec<(&str, TokenId)> = RESERVED.iter().map(|s| (*s, self.reserved_id(s))).collect();
        out.extend(self.special.iter().map(|&i| (self.token(i), i)));
        out.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        out
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let atomic = self.atomic();
        let mut pieces = Vec::new();
        let mut ids = Vec::new();
        let mut plain_start = 0;
        let mut i = 0;
        let bytes = text.as_bytes();
        let flush = |from: usize, to: usize, ids: &mut Vec<TokenId>, pieces: &mut Vec<String>| {
            pieces.clear();
            split_plain(&text[from..to], pieces);
            ids.extend(pieces.iter().map(|p| self.id(p).unwrap_or_else(|| self.unk())));
        };
        while i < bytes.len() {
            if !text.is_char_boundary(i) {
                i += 1;
                continue;
            }
            let hit = atomic.iter().find(|(s, _)| {
                text[i..].starts_with(s) && self.atomic_boundary_ok(text, i, s)
            });
            if let Some(&(s, id)) = hit {
                flush(plain_start, i, &mut ids, &mut pieces);
                ids.push(id);
                i += s.len();
                plain_start = i;
            } else {
                i += 1;
            }
        }
        flush(plain_start, text.len(), &mut ids, &mut pieces);
        ids
    }

    /// Word-like atomic tokens only match on word boundaries.
    fn atomic_boundary_ok(&self, text: &str, at: usize, s: &str) -> bool {
        let first_word = s.chars().next().is_some_and(is_word_char);
        let last_word = s.chars().last().is_some_and(is_word_char);
        let before_ok = !first_word || text[..at].chars().last().is_none_or(|c| !is_word_char(c));
        let after_ok = !last_word || text[at + s.len()..].chars().next().is_none_or(|c| !is_word_char(c));
        before_ok && after_ok
    }

    /// Inverse of [`tokenize`](Self::tokenize) on the answer grammar; skips
    /// `<bos>`, `<eos>` and `<pad>`.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut prev: Option<&str> = None;
        for &id in ids {
            if [self.bos(), self.eos(), self.pad()].contains(&id) {
                continue;
            }
            let tok = self.token(id);
            let is_digit = tok.len() == 1 && tok.as_bytes()[0].is_ascii_digit();
            let glue_left = matches!(tok, "." | "," | "?" | "!" | ":" | ";" | ">")
                || (is_digit && matches!(prev, Some(p) if p == "." || p == "-" || (p.len() == 1 && p.as_bytes()[0].is_ascii_digit())));
            let glue_prev = matches!(prev, Some("<") | Some("-"));
            if prev.is_some() && !glue_left && !glue_prev {
                out.push(' ');
            }
            out.push_str(tok);
            prev = Some(tok);
        }
        out
    }

    /// SHA-256 over the token list and special flags.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (i, t) in self.tokens.iter().enumerate() {
            h.update(t.as_bytes());
            h.update(if self.special.contains(&(i as TokenId)) { b"\x01" } else { b"\x00" });
        }
        hex::encode(h.finalize())
    }

    /// Serialized as one token per line, specials prefixed with `*`.
    pub fn to_text(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if self.special.contains(&(i as TokenId)) {
                    format!("*{t}\n")
                } else {
                    format!(" {t}\n")
                }
            })
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut special = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let (flag, tok) = line.split_at(line.char_indices().nth(1).map_or(line.len(), |(p, _)| p));
            match flag {
                "*" => {
                    special.insert(i as TokenId);
                }
                " " => {}
                _ => return Err(Error::Checkpoint(format!("vocabulary line {}: bad flag", i + 1))),
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || RESERVED.iter().zip(&tokens).any(|(a, b)| a != b) {
            return Err(Error::Checkpoint("vocabulary does not start with the reserved tokens".into()));
        }
        // later entries win so re-registered names resolve to their special id
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Ok(TokenVocab { tokens, index, special })
    }
}

impl fmt::Display for TokenVocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TokenVocab({} tokens, {} special)", self.tokens.len(), self.special.len())
    }
}

/// Appends each name as a new atomic token and reports how it tokenized before.
pub fn register_special_tokens(vocab: &TokenVocab, names: &[&str]) -> Result<(TokenVocab, Vec<SpecialInit>)> {
    let mut out = vocab.clone();
    let mut inits = Vec::new();
    for &name in names {
        let already = RESERVED.contains(&name)
            || out.special.iter().any(|&i| out.token(i) == name);
        if already {
            return Err(Error::DuplicateSpecial(name.to_string()));
        }
        let source_ids = out.tokenize(name);
        let id = out.tokens.len() as TokenId;
        out.tokens.push(name.to_string());
        out.index.insert(name.to_string(), id);
        out.special.insert(id);
        inits.push(SpecialInit {
            token: name.to_string(),
            id,
            source_ids,
        });
    }
    Ok((out, inits))
}

/// Special-token sets per experiment flavour.
pub fn break_tokens() -> Vec<&'static str> {
    vec![BREAK_TOKEN]
}

pub fn extended_special_tokens() -> Vec<&'static str> {
    let mut names = vec![BREAK_TOKEN, IMG1_TAG, IMG2_TAG];
    names.extend(OpKind::ALL.iter().map(|k| k.name()));
    names
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageSlot {
    pub start: usize,
    pub len: usize,
}

/// Where the digits of each ground-truth value sit in the token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DigitPosition {
    /// Index of the digit token; the logits predicting it are at `position - 1`.
    pub position: usize,
    /// 0 = integer digit, 1 = tenths, 2 = hundredths.
    pub place: u8,
    pub op_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub token_ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub image_slots: [ImageSlot; 2],
    pub value_digit_positions: Vec<DigitPosition>,
    pub uses_command: bool,
    /// Number of leading positions (`<bos>` + expanded prompt) before the answer.
    pub prompt_len: usize,
}

impl EncodedSample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn answer_ids(&self) -> &[TokenId] {
        &self.token_ids[self.prompt_len..]
    }

    pub fn slot_of(&self, position: usize) -> Option<usize> {
        self.image_slots
            .iter()
            .position(|s| position >= s.start && position < s.start + s.len)
    }
}

/// `<bos>` + prompt with each image marker expanded into `k` copies of itself.
pub fn assemble_prompt(vocab: &TokenVocab, prompt: &[TokenId], k: usize) -> Result<(Vec<TokenId>, [ImageSlot; 2])> {
    let mut ids = vec![vocab.bos()];
    let mut slots = [None, None];
    for &t in prompt {
        let which = [vocab.img1(), vocab.img2()].iter().position(|&m| m == t);
        match which {
            Some(w) => {
                if slots[w].is_some() {
                    return Err(Error::Template(format!("image marker {} appears twice", w + 1)));
                }
                slots[w] = Some(ImageSlot { start: ids.len(), len: k });
                ids.extend(std::iter::repeat_n(t, k));
            }
            None => ids.push(t),
        }
    }
    match slots {
        [Some(a), Some(b)] => Ok((ids, [a, b])),
        _ => Err(Error::Template("prompt must contain both image markers".into())),
    }
}

/// Full training sequence: prompt prefix, answer, `<eos>`; the loss mask covers
/// exactly the answer and `<eos>`.
pub fn assemble(
    vocab: &TokenVocab,
    prompt: &[TokenId],
    answer: &[TokenId],
    k: usize,
    uses_command: bool,
) -> Result<EncodedSample> {
    let (mut token_ids, image_slots) = assemble_prompt(vocab, prompt, k)?;
    let prompt_len = token_ids.len();
    token_ids.extend_from_slice(answer);
    token_ids.push(vocab.eos());
    let loss_mask = (0..token_ids.len()).map(|i| i >= prompt_len).collect();
    let value_digit_positions = digit_positions(vocab, answer)
        .into_iter()
        .map(|d| DigitPosition {
            position: d.position + prompt_len,
            ..d
        })
        .collect();
    Ok(EncodedSample {
        token_ids,
        loss_mask,
        image_slots,
        value_digit_positions,
        uses_command,
        prompt_len,
    })
}

/// Picks and renders a template, then assembles the training sequence for
/// `answer`. Returns the sample and the template id.
pub fn encode_example(
    vocab: &TokenVocab,
    command: Option<&str>,
    answer: &str,
    style: PromptStyle,
    k: usize,
    rng: &mut impl Rng,
) -> Result<(EncodedSample, u8)> {
    let (prompt, id) = PromptSet::builtin().select_and_render(command, style, rng);
    let sample = assemble(vocab, &vocab.tokenize(&prompt), &vocab.tokenize(answer), k, command.is_some())?;
    Ok((sample, id))
}

/// Finds each `d . d d` value in answer tokens; the n-th value belongs to op n.
fn digit_positions(vocab: &TokenVocab, answer: &[TokenId]) -> Vec<DigitPosition> {
    let digits = vocab.digit_ids();
    let is_digit = |t: TokenId| digits.contains(&t);
    let dot = vocab.id(".");
    let mut out = Vec::new();
    let mut op_index = 0;
    let mut i = 0;
    while i + 4 <= answer.len() {
        let window = &answer[i..i + 4];
        if is_digit(window[0]) && Some(window[1]) == dot && is_digit(window[2]) && is_digit(window[3]) {
            for (place, offset) in [(0u8, 0usize), (1, 2), (2, 3)] {
                out.push(DigitPosition {
                    position: i + offset,
                    place,
                    op_index,
                });
            }
            op_index += 1;
            i += 4;
        } else {
            i += 1;
        }
    }
    out
}
