//! Synthetic triplet corpus: records, answer sentences, vague commands,
//! train/val/test assignment and the on-disk manifest.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imgedit::{apply_spec, synth_image, EditOp, EditSpec, Image, OpKind, IMAGE_SIZE};

pub const GENERATOR_VERSION: &str = "rdlab-gen/1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DATASET_META_FILE: &str = "dataset.json";
pub const SUMMARY_FILE: &str = "summary.txt";

const DEFAULT_PHRASES: &str = include_str!("../assets/phrases.txt");
pub const COMMAND_PREFIXES: [&str; 4] = ["", "I want to ", "Please ", "Let's "];
const SPLIT_SALT: u64 = 0x5711_7a55_1963_0001;
const COMMAND_SALT: u64 = 0xc0aa_a4d5_0000_0002;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable per-record seed derived from the corpus seed and record index.
pub fn record_seed(global_seed: u64, index: u64) -> u64 {
    mix64(mix64(global_seed) ^ index)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Knobs for record generation.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Relative weights of 1, 2 and 3 operations per record.
    pub op_count_weights: [f64; 3],
    pub min_abs_value: f64,
    pub max_abs_value: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            op_count_weights: [0.5, 0.3, 0.2],
            min_abs_value: 0.1,
            max_abs_value: 1.0,
        }
    }
}

impl GenConfig {
    pub fn single_op() -> Self {
        GenConfig {
            op_count_weights: [1.0, 0.0, 0.0],
            ..GenConfig::default()
        }
    }

    fn draw_op_count(&self, rng: &mut impl Rng) -> usize {
        let total: f64 = self.op_count_weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, w) in self.op_count_weights.iter().enumerate() {
            if u < *w {
                return i + 1;
            }
            u -= w;
        }
        // rounding leftovers land on the last non-zero weight
        self.op_count_weights
            .iter()
            .rposition(|&w| w > 0.0)
            .map_or(1, |i| i + 1)
    }
}

/// Rounds to two decimals; every stored value goes through this.
pub fn quantize(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// One (source, edited, command) triplet with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletRecord {
    pub id: String,
    pub seed: u64,
    pub spec: EditSpec,
    pub command: String,
    pub split: Split,
    pub source: Image,
    pub edited: Image,
}

impl TripletRecord {
    pub fn answer_text(&self) -> String {
        render_ground_truth(&self.spec)
    }
}

pub fn record_id(index: u64) -> String {
    format!("r{index:06}")
}

/// Draws the spec and command of record `index` without rendering images.
/// Returns `(record seed, spec, command)`.
pub fn gen_text(global_seed: u64, index: u64, config: &GenConfig) -> (u64, EditSpec, String) {
    let seed = record_seed(global_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = config.draw_op_count(&mut rng);
    let mut kinds = OpKind::ALL.to_vec();
    kinds.shuffle(&mut rng);
    let ops = kinds[..count]
        .iter()
        .map(|&kind| {
            let magnitude = rng.random_range(config.min_abs_value..=config.max_abs_value);
            let signed = if rng.random_bool(0.5) { magnitude } else { -magnitude };
            EditOp::new(kind, quantize(signed)).expect("quantized value lies in [-1, 1]")
        })
        .collect();
    let spec = EditSpec::new(ops).expect("generated ops are distinct and in range");
    let command = gen_command(&spec, mix64(seed ^ COMMAND_SALT));
    (seed, spec, command)
}

/// Builds record `index` of the corpus seeded by `global_seed`. The split is
/// assigned later by [`split_assign`]; records come out tagged `Train`.
pub fn gen_record(global_seed: u64, index: u64, config: &GenConfig) -> TripletRecord {
    let (seed, spec, command) = gen_text(global_seed, index, config);
    let source = synth_image(seed);
    let edited = apply_spec(&source, &spec).expect("generated spec is valid");
    TripletRecord {
        id: record_id(index),
        seed,
        spec,
        command,
        split: Split::Train,
        source,
        edited,
    }
}

/// Formats a value as `-?d.dd`.
pub fn format_value(v: f64) -> String {
    let s = format!("{:.2}", v);
    // "-0.00" cannot be parsed back into a distinct value; normalize it
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Canonical answer sentence for a spec.
pub fn render_ground_truth(spec: &EditSpec) -> String {
    let clause = |op: &EditOp| format!("{} with value {}", op.kind, format_value(op.value));
    match spec.ops() {
        [single] => format!("The edit applied {}.", clause(single)),
        ops => {
            let parts: Vec<String> = ops.iter().map(clause).collect();
            format!("The edits applied were: {}.", parts.join(", "))
        }
    }
}

/// Vague phrases keyed by (operation, value sign).
#[derive(Clone, Debug)]
pub struct PhrasePool {
    pools: BTreeMap<(OpKind, bool), Vec<String>>,
}

impl PhrasePool {
    pub fn builtin() -> &'static PhrasePool {
        use std::sync::OnceLock;
        static POOL: OnceLock<PhrasePool> = OnceLock::new();
        POOL.get_or_init(|| PhrasePool::parse(DEFAULT_PHRASES).expect("builtin phrase asset is valid"))
    }

    /// Parses `name|sign|phrase` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pools: BTreeMap<(OpKind, bool), Vec<String>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('|').collect();
            let [name, sign, phrase] = fields[..] else {
                return Err(Error::Config(format!("phrase line {}: expected 3 fields", i + 1)));
            };
            let positive = match sign {
                "+" => true,
                "-" => false,
                _ => return Err(Error::Config(format!("phrase line {}: bad sign `{sign}`", i + 1))),
            };
            if phrase.chars().any(|c| c.is_ascii_digit()) {
                return Err(Error::Config(format!("phrase line {}: digits not allowed", i + 1)));
            }
            pools
                .entry((name.parse()?, positive))
                .or_default()
                .push(phrase.to_string());
        }
        for kind in OpKind::ALL {
            for positive in [true, false] {
                let n = pools.get(&(kind, positive)).map_or(0, Vec::len);
                if n < 3 {
                    return Err(Error::Config(format!(
                        "phrase pool ({kind}, {}) has {n} phrases, need at least 3",
                        if positive { '+' } else { '-' }
                    )));
                }
            }
        }
        Ok(PhrasePool { pools })
    }

    pub fn phrases(&self, kind: OpKind, positive: bool) -> &[String] {
        &self.pools[&(kind, positive)]
    }

    pub fn all_phrases(&self) -> impl Iterator<Item = &str> {
        self.pools.values().flatten().map(String::as_str)
    }
}

/// Vague edit description: one sign-keyed phrase per op, shuffled, joined
/// with "and", behind a random style prefix.
pub fn gen_command(spec: &EditSpec, seed: u64) -> String {
    gen_command_with(PhrasePool::builtin(), spec, seed)
}

pub fn gen_command_with(pool: &PhrasePool, spec: &EditSpec, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phrases: Vec<&str> = spec
        .ops()
        .iter()
        .map(|op| {
            pool.phrases(op.kind, op.value > 0.0)
                .choose(&mut rng)
                .expect("pools are non-empty")
                .as_str()
        })
        .collect();
    phrases.shuffle(&mut rng);
    let prefix = COMMAND_PREFIXES.choose(&mut rng).expect("non-empty");
    format!("{prefix}{}", phrases.join(" and "))
}

/// Split sizes for `n` records: floor(0.8n), floor(0.1n), remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Seeded permutation of `0..n` cut 80/10/10.
pub fn split_assign(n: usize, seed: u64) -> Result<Vec<Split>> {
    if n < 10 {
        return Err(Error::TooFewRecords(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, val, _) = split_sizes(n);
    let mut labels = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        labels[idx] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<TripletRecord>,
    pub generator_version: String,
    pub global_seed: u64,
    pub op_vocabulary: Vec<String>,
}

impl Manifest {
    /// Generates `n` records and assigns splits.
    pub fn generate(global_seed: u64, n: usize, config: &GenConfig) -> Result<Self> {
        let labels = split_assign(n, mix64(global_seed ^ SPLIT_SALT))?;
        let records = labels
            .into_iter()
            .enumerate()
            .map(|(i, split)| TripletRecord {
                split,
                ..gen_record(global_seed, i as u64, config)
            })
            .collect();
        Ok(Manifest {
            records,
            generator_version: GENERATOR_VERSION.to_string(),
            global_seed,
            op_vocabulary: OpKind::ALL.iter().map(|k| k.name().to_string()).collect(),
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TripletRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let count = |s| self.split(s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }

    /// Histogram of op counts (index 0 = single-op records).
    pub fn op_count_histogram(&self) -> [usize; 3] {
        let mut hist = [0; 3];
        for r in &self.records {
            hist[r.spec.len() - 1] += 1;
        }
        hist
    }

    pub fn summary(&self) -> String {
        let (train, val, test) = self.split_counts();
        let hist = self.op_count_histogram();
        format!(
            "records={}\ntrain={train}\nval={val}\ntest={test}\nops_1={}\nops_2={}\nops_3={}\n",
            self.records.len(),
            hist[0],
            hist[1],
            hist[2]
        )
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_png(img: &Image) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, IMAGE_SIZE as u32, IMAGE_SIZE as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("in-memory png header");
        writer
            .write_image_data(&img.to_rgb8())
            .expect("in-memory png body");
    }
    out
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<Image, String> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let info = reader.info();
    if info.width as usize != IMAGE_SIZE || info.height as usize != IMAGE_SIZE {
        return Err(format!("unexpected size {}x{}", info.width, info.height));
    }
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err("expected 8-bit RGB".into());
    }
    let mut buf = vec![0; reader.output_buffer_size().ok_or("png buffer size overflow")?];
    let frame = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    buf.truncate(frame.buffer_size());
    Image::from_rgb8(&buf).map_err(|e| e.to_string())
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn source_png_path(id: &str) -> String {
    format!("images/{id}_src.png")
}

fn edited_png_path(id: &str) -> String {
    format!("images/{id}_edit.png")
}

/// One manifest line. Values are written with exactly two decimals, so the
/// line is assembled by hand rather than through a serializer.
fn manifest_line(r: &TripletRecord, src_sha: &str, edit_sha: &str) -> String {
    let ops: Vec<String> = r
        .spec
        .ops()
        .iter()
        .map(|op| format!("{{\"name\":{},\"value\":{}}}", json_str(op.kind.name()), format_value(op.value)))
        .collect();
    format!(
        "{{\"id\":{},\"seed\":{},\"ops\":[{}],\"command\":{},\"split\":{},\"source_png\":{},\"edited_png\":{},\"answer_text\":{},\"source_sha256\":{},\"edited_sha256\":{}}}",
        json_str(&r.id),
        r.seed,
        ops.join(","),
        json_str(&r.command),
        json_str(r.split.as_str()),
        json_str(&source_png_path(&r.id)),
        json_str(&edited_png_path(&r.id)),
        json_str(&r.answer_text()),
        json_str(src_sha),
        json_str(edit_sha),
    )
}

#[derive(Deserialize)]
struct OpLine {
    name: String,
    value: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    seed: u64,
    ops: Vec<OpLine>,
    command: String,
    split: String,
    source_png: String,
    edited_png: String,
    answer_text: String,
    source_sha256: String,
    edited_sha256: String,
}

#[derive(serde::Serialize, Deserialize)]
struct DatasetMeta {
    generator_version: String,
    global_seed: u64,
    op_vocabulary: Vec<String>,
    records: usize,
}

/// Writes `manifest.jsonl`, `dataset.json`, `summary.txt` and the PNG images.
pub fn write_manifest(manifest: &Manifest, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut lines = String::new();
    for r in &manifest.records {
        let src = encode_png(&r.source);
        let edit = encode_png(&r.edited);
        write_file(&dir.join(source_png_path(&r.id)), &src)?;
        write_file(&dir.join(edited_png_path(&r.id)), &edit)?;
        lines.push_str(&manifest_line(r, &sha256_hex(&src), &sha256_hex(&edit)));
        lines.push('\n');
    }
    write_file(&dir.join(MANIFEST_FILE), lines.as_bytes())?;
    let meta = DatasetMeta {
        generator_version: manifest.generator_version.clone(),
        global_seed: manifest.global_seed,
        op_vocabulary: manifest.op_vocabulary.clone(),
        records: manifest.records.len(),
    };
    let meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    write_file(&dir.join(DATASET_META_FILE), meta_json.as_bytes())?;
    write_file(&dir.join(SUMMARY_FILE), manifest.summary().as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_record_image(dir: &Path, record: &str, rel: &str, sha: &str) -> Result<Image> {
    let path: PathBuf = dir.join(rel);
    let bytes = fs::read(&path).map_err(|_| Error::MissingFile {
        record: record.to_string(),
        path: path.clone(),
    })?;
    if sha256_hex(&bytes) != sha {
        return Err(Error::Checksum {
            record: record.to_string(),
            file: rel.to_string(),
        });
    }
    decode_png(&bytes).map_err(|detail| Error::ImageDecode {
        record: record.to_string(),
        detail,
    })
}

fn parse_record_line(line: &str, lineno: usize) -> Result<RecordLine> {
    serde_json::from_str(line).map_err(|e| Error::ManifestLine {
        line: lineno,
        message: e.to_string(),
    })
}

/// Reads a manifest directory. With `verify`, every record is regenerated
/// from its seed and compared against the stored images within one 8-bit step.
pub fn read_manifest(dir: &Path, verify: bool) -> Result<Manifest> {
    let meta_path = dir.join(DATASET_META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| Error::ManifestLine {
        line: 0,
        message: format!("{DATASET_META_FILE}: {e}"),
    })?;
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let bad = |message: String| Error::ManifestLine { line: lineno, message };
        let raw = parse_record_line(line, lineno)?;
        if !seen.insert(raw.id.clone()) {
            return Err(bad(format!("duplicate record id {}", raw.id)));
        }
        let ops = raw
            .ops
            .iter()
            .map(|o| {
                if quantize(o.value) != o.value {
                    return Err(bad(format!("value {} is not on the 0.01 grid", o.value)));
                }
                EditOp::named(&o.name, o.value).map_err(|e| bad(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = EditSpec::new(ops).map_err(|e| bad(e.to_string()))?;
        if render_ground_truth(&spec) != raw.answer_text {
            return Err(bad(format!("answer_text disagrees with ops for {}", raw.id)));
        }
        let split: Split = raw.split.parse().map_err(|e: Error| bad(e.to_string()))?;
        let source = read_record_image(dir, &raw.id, &raw.source_png, &raw.source_sha256)?;
        let edited = read_record_image(dir, &raw.id, &raw.edited_png, &raw.edited_sha256)?;
        let record = TripletRecord {
            id: raw.id,
            seed: raw.seed,
            spec,
            command: raw.command,
            split,
            source,
            edited,
        };
        if verify {
            verify_record(&record)?;
        }
        records.push(record);
    }
    if records.len() != meta.records {
        return Err(Error::ManifestLine {
            line: records.len() + 1,
            message: format!("expected {} records, found {}", meta.records, records.len()),
        });
    }
    Ok(Manifest {
        records,
        generator_version: meta.generator_version,
        global_seed: meta.global_seed,
        op_vocabulary: meta.op_vocabulary,
    })
}

fn within_one_step(a: &Image, b: &Image) -> bool {
    a.to_rgb8()
        .iter()
        .zip(b.to_rgb8())
        .all(|(&x, y)| x.abs_diff(y) <= 1)
}

/// Regenerates a record from its seed and checks the stored images and command.
pub fn verify_record(record: &TripletRecord) -> Result<()> {
    let fail = |detail: &str| Error::Integrity {
        record: record.id.clone(),
        detail: detail.to_string(),
    };
    let source = synth_image(record.seed);
    let edited = apply_spec(&source, &record.spec)?;
    if !within_one_step(&source, &record.source) {
        return Err(fail("source image does not match its seed"));
    }
    if !within_one_step(&edited, &record.edited) {
        return Err(fail("edited image does not match apply_spec(source, spec)"));
    }
    if record.command.chars().any(|c| c.is_ascii_digit()) {
        return Err(fail("command contains digits"));
    }
    Ok(())
}

/// SHA-256 over the manifest file, the dataset metadata and every image, in
/// manifest order.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in [MANIFEST_FILE, DATASET_META_FILE] {
        let p = dir.join(name);
        hasher.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| Error::io(dir, e))?;
    for (i, line) in text.lines().enumerate() {
        let raw = parse_record_line(line, i + 1)?;
        for rel in [raw.source_png, raw.edited_png] {
            let p = dir.join(&rel);
            hasher.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use regex::Regex;

    fn op(kind: OpKind, value: f64) -> EditOp {
        EditOp::new(kind, value).unwrap()
    }

    #[test]
    fn records_are_deterministic() {
        let cfg = GenConfig::default();
        assert_eq!(gen_record(7, 3, &cfg), gen_record(7, 3, &cfg));
        assert_ne!(gen_record(7, 3, &cfg).seed, gen_record(7, 4, &cfg).seed);
    }

    #[test]
    fn values_sit_on_grid_outside_dead_zone() {
        let cfg = GenConfig::default();
        let pattern = Regex::new(r"^-?[0-9]\.[0-9]{2}$").unwrap();
        let mut singles = 0;
        let n = 10_000;
        for i in 0..n {
            let r = gen_record(1, i, &cfg);
            singles += usize::from(r.spec.len() == 1);
            for o in r.spec.ops() {
                assert!((0.1..=1.0).contains(&o.value.abs()), "{}", o.value);
                assert!(pattern.is_match(&format_value(o.value)));
                assert_eq!(quantize(o.value), o.value);
            }
        }
        // binomial sd at n=10k, p=0.5 is 0.005; 0.02 is four sigma
        let frac = singles as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "single-op fraction {frac}");
    }

    #[test]
    fn ground_truth_sentences() {
        let one = EditSpec::new(vec![op(OpKind::Brightness, -0.30)]).unwrap();
        assert_eq!(render_ground_truth(&one), "The edit applied brightness with value -0.30.");
        let two = EditSpec::new(vec![op(OpKind::Contrast, 0.45), op(OpKind::Hue, -0.10)]).unwrap();
        assert_eq!(
            render_ground_truth(&two),
            "The edits applied were: contrast with value 0.45, hue with value -0.10."
        );
    }

    #[test]
    fn commands_are_vague_and_deterministic() {
        let spec = EditSpec::new(vec![op(OpKind::Brightness, 0.6)]).unwrap();
        let cmd = gen_command(&spec, 99);
        assert_eq!(cmd, gen_command(&spec, 99));
        let pool = PhrasePool::builtin().phrases(OpKind::Brightness, true);
        let body = COMMAND_PREFIXES
            .iter()
            .filter(|p| !p.is_empty())
            .find_map(|p| cmd.strip_prefix(p))
            .unwrap_or(&cmd);
        assert!(pool.iter().any(|p| p == body), "{cmd}");

        let value = Regex::new(r"-?[0-9]\.[0-9]{2}").unwrap();
        for i in 0..2000 {
            let r = gen_record(5, i, &GenConfig::default());
            assert!(!r.command.chars().any(|c| c.is_ascii_digit()), "{}", r.command);
            assert!(!value.is_match(&r.command));
        }
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(22_000), (17_600, 2_200, 2_200));
        assert_eq!(split_sizes(2_000), (1_600, 200, 200));
        assert!(matches!(split_assign(9, 0), Err(Error::TooFewRecords(9))));
        let labels = split_assign(1234, 3).unwrap();
        let count = |s| labels.iter().filter(|&&l| l == s).count();
        let (a, b, c) = split_sizes(1234);
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (a, b, c));
    }

    #[test]
    fn phrase_pool_rejects_small_pools() {
        assert!(PhrasePool::parse("brightness|+|make it brighter").is_err());
        assert!(PhrasePool::parse("blur|+|x").is_err());
    }

    #[test]
    fn manifest_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::generate(11, 20, &GenConfig::default()).unwrap();
        write_manifest(&m, dir.path()).unwrap();
        let back = read_manifest(dir.path(), true).unwrap();
        assert_eq!(back.records.len(), m.records.len());
        for (a, b) in m.records.iter().zip(&back.records) {
            assert_eq!((&a.id, a.seed, &a.spec, &a.command, a.split), (&b.id, b.seed, &b.spec, &b.command, b.split));
            assert!(within_one_step(&a.edited, &b.edited));
        }
        assert_eq!(back.global_seed, 11);

        // truncated line
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = &lines[4][..lines[4].len() / 2];
        lines[4] = cut;
        fs::write(&path, lines.join("\n")).unwrap();
        match read_manifest(dir.path(), false) {
            Err(Error::ManifestLine { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn verify_catches_rewritten_image() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::generate(12, 10, &GenConfig::default()).unwrap();
        write_manifest(&m, dir.path()).unwrap();
        let victim = &m.records[3];

        // flip one pixel, re-encode, and patch the checksum so only regeneration can notice
        let mut bytes = victim.edited.to_rgb8();
        bytes[0] = bytes[0].wrapping_add(128);
        let tampered = encode_png(&Image::from_rgb8(&bytes).unwrap());
        let rel = edited_png_path(&victim.id);
        let old_sha = sha256_hex(&fs::read(dir.path().join(&rel)).unwrap());
        fs::write(dir.path().join(&rel), &tampered).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace(&old_sha, &sha256_hex(&tampered));
        fs::write(&path, text).unwrap();

        assert!(read_manifest(dir.path(), false).is_ok());
        match read_manifest(dir.path(), true) {
            Err(Error::Integrity { record, .. }) => assert_eq!(record, victim.id),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn checksum_mismatch_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::generate(13, 10, &GenConfig::default()).unwrap();
        write_manifest(&m, dir.path()).unwrap();
        let victim = &m.records[0];
        let rel = source_png_path(&victim.id);
        let mut bytes = fs::read(dir.path().join(&rel)).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(dir.path().join(&rel), bytes).unwrap();
        match read_manifest(dir.path(), false) {
            Err(Error::Checksum { record, .. }) => assert_eq!(record, victim.id),
            other => panic!("expected checksum error, got {other:?}"),
        }
        fs::remove_file(dir.path().join(&rel)).unwrap();
        assert!(matches!(read_manifest(dir.path(), false), Err(Error::MissingFile { .. })));
    }
}
