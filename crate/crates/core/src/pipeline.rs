//! File-level commands behind the `vitr` binary.
//!
//! Every command reads its inputs, writes its artifacts under an output
//! directory and returns the paths it wrote. Apart from the timing tables,
//! artifacts depend only on inputs and seeds.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::{self, timed_eval};
use crate::features::Corpus;
use crate::heatmap::export_heatmap;
use crate::loss::TrainConfig;
use crate::model::{Mode, ModelConfig, VitrParams};
use crate::retrieval::{retrieve_all, Direction};
use crate::synth::{synth_corpus, synth_split, SynthConfig};
use crate::train::{history_text, train};

pub const CORPUS_FILE: &str = "corpus.vitr";
pub const TEST_CORPUS_FILE: &str = "test.vitr";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "loss_history.txt";

/// Fails with a parameter error naming `path` unless it is an existing file.
pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Param(format!("{what} `{}` does not exist", path.display())))
    }
}

fn write(out: &Path, name: &str, bytes: impl AsRef<[u8]>, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn directions(direction: Option<Direction>) -> Vec<Direction> {
    direction.map_or_else(|| Direction::ALL.to_vec(), |d| vec![d])
}

/// Writes a synthetic corpus, plus a held-out corpus when `test_images > 0`.
pub fn cmd_synth(config: &SynthConfig, test_images: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if test_images == 0 {
        write(out, CORPUS_FILE, synth_corpus(config)?.to_bytes(), &mut written)?;
    } else {
        let (train, test) = synth_split(config, test_images)?;
        write(out, CORPUS_FILE, train.to_bytes(), &mut written)?;
        write(out, TEST_CORPUS_FILE, test.to_bytes(), &mut written)?;
    }
    Ok(written)
}

/// Trains a model shaped by `model` (dimensions taken from the corpus) and
/// writes the checkpoint and the per-epoch loss history.
pub fn cmd_train(corpus: &Path, model: &ModelConfig, config: &TrainConfig, out: &Path) -> Result<Vec<PathBuf>> {
    require_file(corpus, "corpus")?;
    let corpus = Corpus::load(corpus)?;
    let trained = train_model(&corpus, model, config)?;
    let mut written = Vec::new();
    write(out, CHECKPOINT_FILE, checkpoint::to_bytes(&trained.0), &mut written)?;
    write(out, HISTORY_FILE, history_text(&trained.1), &mut written)?;
    Ok(written)
}

fn train_model(
    corpus: &Corpus,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(VitrParams, Vec<crate::train::EpochRecord>)> {
    let dims = corpus.dims();
    let params = VitrParams::new(ModelConfig {
        d1: dims.d1,
        d2: dims.d2,
        k: dims.k,
        ..model.clone()
    })?;
    train(corpus, params, config)
}

fn load_pair(corpus: &Path, ckpt: &Path) -> Result<(Corpus, VitrParams)> {
    require_file(corpus, "corpus")?;
    require_file(ckpt, "checkpoint")?;
    let corpus = Corpus::load(corpus)?;
    let model = checkpoint::load(ckpt)?;
    model.check_dims(corpus.dims())?;
    Ok((corpus, model))
}

/// Ranks every query; one results file per direction and turbo setting
/// (`turbo_n` empty means exhaustive only).
pub fn cmd_retrieve(
    corpus: &Path,
    ckpt: &Path,
    direction: Option<Direction>,
    turbo_n: &[usize],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (corpus, model) = load_pair(corpus, ckpt)?;
    let settings: Vec<Option<usize>> = if turbo_n.is_empty() {
        vec![None]
    } else {
        turbo_n.iter().map(|&n| Some(n)).collect()
    };
    let mut written = Vec::new();
    for dir in directions(direction) {
        for &n in &settings {
            let results = retrieve_all(&corpus, &model, dir, n)?;
            let text: String = results.iter().map(|r| r.to_record() + "\n").collect();
            let label = n.map_or_else(|| "all".to_string(), |n| format!("N{n}"));
            write(out, &format!("rankings_{dir}_{label}.txt"), text, &mut written)?;
        }
    }
    Ok(written)
}

/// Exhaustive Recall@{1,5,10} of one model in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallRow {
    pub mode: Mode,
    pub i2t: [f64; 3],
    pub t2i: [f64; 3],
}

impl RecallRow {
    pub const HEADER: &'static str = "mode,i2t_r1,i2t_r5,i2t_r10,t2i_r1,t2i_r5,t2i_r10";

    pub fn to_csv(&self) -> String {
        let v: Vec<String> = self.i2t.iter().chain(&self.t2i).map(|x| x.to_string()).collect();
        format!("{},{}", self.mode, v.join(","))
    }

    pub fn to_text(&self) -> String {
        let v: Vec<String> = self.i2t.iter().chain(&self.t2i).map(|x| format!("{x:>8.2}")).collect();
        format!("{:<8} {}", self.mode.as_str(), v.join(" "))
    }

    pub fn text_header() -> String {
        let cols = ["i2t R@1", "i2t R@5", "i2t R@10", "t2i R@1", "t2i R@5", "t2i R@10"];
        let v: Vec<String> = cols.iter().map(|c| format!("{c:>8}")).collect();
        format!("{:<8} {}", "mode", v.join(" "))
    }
}

fn recall_table(rows: &[RecallRow]) -> (String, String) {
    let mut text = RecallRow::text_header() + "\n";
    let mut csv = String::from(RecallRow::HEADER) + "\n";
    for r in rows {
        text += &(r.to_text() + "\n");
        csv += &(r.to_csv() + "\n");
    }
    (text, csv)
}

/// Recalls of `model` over every query, computed exhaustively.
pub fn recall_row(corpus: &Corpus, model: &VitrParams) -> Result<RecallRow> {
    let mut row = RecallRow {
        mode: model.mode(),
        i2t: [0.0; 3],
        t2i: [0.0; 3],
    };
    for dir in Direction::ALL {
        let results = retrieve_all(corpus, model, dir, None)?;
        let r = eval::recalls(&results, &eval::relevance(corpus, dir))?;
        match dir {
            Direction::ImageToText => row.i2t = r,
            Direction::TextToImage => row.t2i = r,
        }
    }
    Ok(row)
}

/// Writes `recall.{txt,csv}` (deterministic) and `timing.{txt,csv}`
/// (wall-clock per query for each turbo size and exhaustive scoring).
pub fn cmd_eval(
    corpus: &Path,
    ckpt: &Path,
    turbo_n: &[usize],
    direction: Option<Direction>,
    max_queries: Option<usize>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (corpus, model) = load_pair(corpus, ckpt)?;
    let mut written = Vec::new();
    let (text, csv) = recall_table(&[recall_row(&corpus, &model)?]);
    write(out, "recall.txt", text, &mut written)?;
    write(out, "recall.csv", csv, &mut written)?;

    let (mut text, mut csv) = (String::new(), String::new());
    for (i, dir) in directions(direction).into_iter().enumerate() {
        let (table, _) = timed_eval(&corpus, &model, turbo_n, dir, max_queries)?;
        if i > 0 {
            text.push('\n');
        }
        text += &table.to_text();
        let body = table.to_csv();
        csv += if i == 0 { &body } else { body.split_once('\n').map_or("", |(_, rest)| rest) };
    }
    write(out, "timing.txt", text, &mut written)?;
    write(out, "timing.csv", csv, &mut written)?;
    Ok(written)
}

/// Trains one model per mode from the same configuration and seed, then
/// writes `ablation.{txt,csv}` (one row per mode) and each mode's checkpoint.
///
/// When `eval_corpus` is given the recalls are measured on it instead of the
/// training corpus.
pub fn cmd_ablate(
    corpus: &Path,
    eval_corpus: Option<&Path>,
    model: &ModelConfig,
    config: &TrainConfig,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    require_file(corpus, "corpus")?;
    if let Some(p) = eval_corpus {
        require_file(p, "evaluation corpus")?;
    }
    let train_corpus = Corpus::load(corpus)?;
    let eval_corpus = match eval_corpus {
        Some(p) => Corpus::load(p)?,
        None => train_corpus.clone(),
    };
    let mut written = Vec::new();
    let mut rows = Vec::with_capacity(Mode::ALL.len());
    for mode in Mode::ALL {
        let cfg = ModelConfig { mode, ..model.clone() };
        let (trained, _) = train_model(&train_corpus, &cfg, config)?;
        write(out, &format!("ablate_{mode}.ckpt"), checkpoint::to_bytes(&trained), &mut written)?;
        rows.push(recall_row(&eval_corpus, &trained)?);
    }
    let (text, csv) = recall_table(&rows);
    write(out, "ablation.txt", text, &mut written)?;
    write(out, "ablation.csv", csv, &mut written)?;
    Ok(written)
}

/// Exports the region heat map for one pair; by default the first image and
/// its first relevant description.
pub fn cmd_heatmap(
    corpus: &Path,
    ckpt: &Path,
    image: Option<u64>,
    description: Option<u64>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (corpus, model) = load_pair(corpus, ckpt)?;
    let image = image.unwrap_or(corpus.images()[0].id);
    let img = corpus
        .image(image)
        .ok_or_else(|| Error::Input(format!("unknown image {image}")))?;
    let description = match description {
        Some(d) => d,
        None => *corpus
            .relevant_descriptions(image)
            .and_then(|s| s.iter().next())
            .ok_or_else(|| Error::Input(format!("image {image} has no relevant description")))?,
    };
    let desc = corpus
        .description(description)
        .ok_or_else(|| Error::Input(format!("unknown description {description}")))?;
    let trace = model.attention_trace(img, desc)?;
    let heat = export_heatmap(&trace);
    let stem = format!("{image}_{description}");
    let mut written = Vec::new();
    write(out, &format!("heatmap_{stem}.txt"), heat.to_grid_text(), &mut written)?;
    write(out, &format!("heatmap_{stem}.pgm"), heat.to_pgm(), &mut written)?;
    write(out, &format!("attention_{stem}.txt"), trace.to_table(), &mut written)?;
    Ok(written)
}
