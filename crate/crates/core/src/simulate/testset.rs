//! Manifest-driven test-set generation.
//!
//! The manifest is a tab-separated file with a header line and one row per item. Columns:
//! `id kind vocal accomp noise backing seed snr_accomp_db snr_noise_db snr_backing_db shift
//! candidates chosen accomp_offset noise_offset backing_offset gain`. Absent values are empty.
//! `candidates` lists the drawn candidate vocal indices separated by commas; `chosen` is the
//! position of the selected one in that list. Every random draw of an item comes from a
//! generator seeded with its `seed` column, so rows regenerate bit-exactly.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::wav::{read_wav, write_wav, WavEncoding, NATIVE_RATE};
use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};
use crate::simulate::backing::{mix_backing, select_backing, MAX_CANDIDATES, SHIFT_SEMITONES};
use crate::simulate::mix::simulate_pair;

/// Peak ceiling of generated mixtures, in dBFS.
pub const PEAK_CEILING_DBFS: f64 = -1.0;
pub const DEFAULT_COUNT_PER_VOCAL: usize = 5;

pub const MANIFEST_HEADER: &str = "id\tkind\tvocal\taccomp\tnoise\tbacking\tseed\tsnr_accomp_db\tsnr_noise_db\tsnr_backing_db\tshift\tcandidates\tchosen\taccomp_offset\tnoise_offset\tbacking_offset\tgain";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestSetKind {
    WithoutBacking,
    RandomBacking,
    SelectedBacking,
}

impl TestSetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::WithoutBacking => "without_backing",
            Self::RandomBacking => "random_backing",
            Self::SelectedBacking => "selected_backing",
        }
    }
}

impl fmt::Display for TestSetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestSetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "without" | "without_backing" => Ok(Self::WithoutBacking),
            "random" | "random_backing" => Ok(Self::RandomBacking),
            "selected" | "selected_backing" => Ok(Self::SelectedBacking),
            _ => Err(Error::config(format!("unknown test-set kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub name: String,
    pub audio: AudioBuffer,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sources {
    pub vocals: Vec<Source>,
    pub accomps: Vec<Source>,
    pub noises: Vec<Source>,
}

fn load_dir(dir: &Path) -> Result<Vec<Source>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")));
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(Source { name, audio: read_wav(&p, NATIVE_RATE, false)? })
        })
        .collect()
}

impl Sources {
    /// WAV files of each directory, sorted by file name.
    pub fn load(vocals: &Path, accomps: Option<&Path>, noises: Option<&Path>) -> Result<Self> {
        let list = load_dir(vocals)?;
        if list.is_empty() {
            return Err(Error::invalid(format!("no vocal WAV files in {}", vocals.display())));
        }
        Ok(Self {
            vocals: list,
            accomps: accomps.map(load_dir).transpose()?.unwrap_or_default(),
            noises: noises.map(load_dir).transpose()?.unwrap_or_default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub kind: TestSetKind,
    pub vocal: String,
    pub accomp: Option<String>,
    pub noise: Option<String>,
    pub backing: Option<String>,
    pub seed: u64,
    pub snr_accomp_db: Option<f64>,
    pub snr_noise_db: Option<f64>,
    pub snr_backing_db: Option<f64>,
    pub shift: Option<i32>,
    pub candidates: Vec<usize>,
    pub chosen: Option<usize>,
    pub accomp_offset: Option<usize>,
    pub noise_offset: Option<usize>,
    pub backing_offset: Option<usize>,
    pub gain: f64,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn parse_opt<T: FromStr>(s: &str, field: &str) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Format(format!("manifest field {field}: cannot parse {s:?}")))
}

fn parse_req<T: FromStr>(s: &str, field: &str) -> Result<T> {
    parse_opt(s, field)?.ok_or_else(|| Error::Format(format!("manifest field {field} is empty")))
}

impl ManifestRow {
    /// Floats use Rust's shortest round-trip formatting.
    pub fn to_line(&self) -> String {
        let f = |v: &Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let cands = self.candidates.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        [
            self.id.clone(),
            self.kind.to_string(),
            self.vocal.clone(),
            opt(&self.accomp),
            opt(&self.noise),
            opt(&self.backing),
            self.seed.to_string(),
            f(&self.snr_accomp_db),
            f(&self.snr_noise_db),
            f(&self.snr_backing_db),
            opt(&self.shift),
            cands,
            opt(&self.chosen),
            opt(&self.accomp_offset),
            opt(&self.noise_offset),
            opt(&self.backing_offset),
            format!("{:?}", self.gain),
        ]
        .join("\t")
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 17 {
            return Err(Error::Format(format!("manifest row has {} fields, expected 17", c.len())));
        }
        let s = |i: usize| (!c[i].is_empty()).then(|| c[i].to_string());
        let candidates = if c[11].is_empty() {
            Vec::new()
        } else {
            c[11].split(',').map(|v| parse_req(v, "candidates")).collect::<Result<_>>()?
        };
        Ok(Self {
            id: c[0].to_string(),
            kind: c[1].parse()?,
            vocal: c[2].to_string(),
            accomp: s(3),
            noise: s(4),
            backing: s(5),
            seed: parse_req(c[6], "seed")?,
            snr_accomp_db: parse_opt(c[7], "snr_accomp_db")?,
            snr_noise_db: parse_opt(c[8], "snr_noise_db")?,
            snr_backing_db: parse_opt(c[9], "snr_backing_db")?,
            shift: parse_opt(c[10], "shift")?,
            candidates,
            chosen: parse_opt(c[12], "chosen")?,
            accomp_offset: parse_opt(c[13], "accomp_offset")?,
            noise_offset: parse_opt(c[14], "noise_offset")?,
            backing_offset: parse_opt(c[15], "backing_offset")?,
            gain: parse_req(c[16], "gain")?,
        })
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("{}: missing or unknown manifest header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(ManifestRow::parse_line).collect()
}

/// Seed of item `index` under `master`.
pub fn item_seed(master: u64, index: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(index as u64 + 1);
    r.gen()
}

/// One generated item.
#[derive(Debug, Clone, PartialEq)]
pub struct TestItem {
    pub row: ManifestRow,
    pub noisy: AudioBuffer,
    pub clean: AudioBuffer,
}

/// Generates one item. Draw order: accompaniment index, noise index, backing (candidate
/// indices, then the backing draws), then the two mixing draws of `simulate_pair`.
pub fn generate_item(kind: TestSetKind, sources: &Sources, vocal: usize, id: &str, seed: u64) -> Result<TestItem> {
    let lead = &sources.vocals.get(vocal).ok_or_else(|| Error::invalid(format!("no vocal with index {vocal}")))?.audio;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let accomp = (!sources.accomps.is_empty()).then(|| rng.gen_range(0..sources.accomps.len()));
    let noise = (!sources.noises.is_empty()).then(|| rng.gen_range(0..sources.noises.len()));
    let others: Vec<usize> = (0..sources.vocals.len()).filter(|&i| i != vocal).collect();
    if kind != TestSetKind::WithoutBacking && others.is_empty() {
        return Err(Error::invalid("backing test sets need at least two vocals"));
    }

    let mut row = ManifestRow {
        id: id.to_string(),
        kind,
        vocal: sources.vocals[vocal].name.clone(),
        accomp: accomp.map(|i| sources.accomps[i].name.clone()),
        noise: noise.map(|i| sources.noises[i].name.clone()),
        backing: None,
        seed,
        snr_accomp_db: None,
        snr_noise_db: None,
        snr_backing_db: None,
        shift: None,
        candidates: Vec::new(),
        chosen: None,
        accomp_offset: None,
        noise_offset: None,
        backing_offset: None,
        gain: 1.0,
    };
    let backing = match kind {
        TestSetKind::WithoutBacking => None,
        TestSetKind::RandomBacking => {
            let pick = others[rng.gen_range(0..others.len())];
            row.candidates = vec![pick];
            row.chosen = Some(0);
            Some((pick, mix_backing(lead, &sources.vocals[pick].audio, 0, &mut rng)?))
        }
        TestSetKind::SelectedBacking => {
            let n = others.len().min(MAX_CANDIDATES);
            row.candidates = sample(&mut rng, others.len(), n).into_iter().map(|i| others[i]).collect();
            let cands: Vec<AudioBuffer> = row.candidates.iter().map(|&i| sources.vocals[i].audio.clone()).collect();
            let choice = select_backing(lead, &cands, &mut rng)?;
            row.chosen = Some(choice.index);
            debug_assert_eq!(choice.mix.shift.abs(), SHIFT_SEMITONES);
            Some((row.candidates[choice.index], choice.mix))
        }
    };
    let vocal_mix = match &backing {
        Some((pick, m)) => {
            row.backing = Some(sources.vocals[*pick].name.clone());
            row.snr_backing_db = Some(m.snr_db);
            row.shift = Some(m.shift);
            row.backing_offset = Some(m.offset);
            m.mixture.clone()
        }
        None => lead.clone(),
    };
    let pair = simulate_pair(
        &vocal_mix,
        accomp.map(|i| &sources.accomps[i].audio),
        noise.map(|i| &sources.noises[i].audio),
        &mut rng,
    )?;
    row.snr_accomp_db = pair.accomp.map(|s| s.snr_db);
    row.accomp_offset = pair.accomp.map(|s| s.offset);
    row.snr_noise_db = pair.noise.map(|s| s.snr_db);
    row.noise_offset = pair.noise.map(|s| s.offset);

    let ceiling = 10f64.powf(PEAK_CEILING_DBFS / 20.0);
    let peak = pair.noisy.peak();
    row.gain = if peak > ceiling { ceiling / peak } else { 1.0 };
    Ok(TestItem { noisy: pair.noisy.scaled(row.gain), clean: lead.scaled(row.gain), row })
}

fn write_item(out: &Path, item: &TestItem) -> Result<()> {
    write_wav(out.join("noisy").join(format!("{}.wav", item.row.id)), &item.noisy, WavEncoding::Float32)?;
    write_wav(out.join("clean").join(format!("{}.wav", item.row.id)), &item.clean, WavEncoding::Float32)
}

/// Writes `noisy/<id>.wav`, `clean/<id>.wav` and `manifest.tsv` under `out`.
pub fn build_test_set(
    kind: TestSetKind,
    sources: &Sources,
    count_per_vocal: usize,
    master_seed: u64,
    out: &Path,
) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(out.join("noisy"))?;
    fs::create_dir_all(out.join("clean"))?;
    let mut rows = Vec::with_capacity(sources.vocals.len() * count_per_vocal);
    for v in 0..sources.vocals.len() {
        for k in 0..count_per_vocal {
            let index = v * count_per_vocal + k;
            let id = format!("{}_{k:02}", sources.vocals[v].name);
            let item = generate_item(kind, sources, v, &id, item_seed(master_seed, index))?;
            write_item(out, &item)?;
            rows.push(item.row);
        }
    }
    write_manifest(&out.join("manifest.tsv"), &rows)?;
    Ok(rows)
}

/// Re-creates every item of a manifest under `out` and checks the recorded draws.
pub fn regenerate(manifest: &Path, sources: &Sources, out: &Path) -> Result<Vec<ManifestRow>> {
    let rows = read_manifest(manifest)?;
    fs::create_dir_all(out.join("noisy"))?;
    fs::create_dir_all(out.join("clean"))?;
    for row in &rows {
        let v = sources
            .vocals
            .iter()
            .position(|s| s.name == row.vocal)
            .ok_or_else(|| Error::invalid(format!("vocal {:?} not among the sources", row.vocal)))?;
        let item = generate_item(row.kind, sources, v, &row.id, row.seed)?;
        if &item.row != row {
            return Err(Error::State(format!("item {} does not regenerate to its manifest row", row.id)));
        }
        write_item(out, &item)?;
    }
    write_manifest(&out.join("manifest.tsv"), &rows)?;
    Ok(rows)
}
