//! Directory layout: `manifest.json` plus `motions/<id>.csv` and
//! `exemplars/<k>.csv`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActionSpec, Corpus, CorpusConfig, CorpusItem};
use crate::error::{Error, Result};
use crate::motion::{read_raw_csv, write_raw_csv};

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    id: usize,
    spec: ActionSpec,
    template_id: usize,
    caption: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    config: CorpusConfig,
    items: Vec<ItemRecord>,
    exemplars: Vec<ItemRecord>,
    train: Vec<usize>,
    test: Vec<usize>,
}

fn record(it: &CorpusItem) -> ItemRecord {
    ItemRecord {
        id: it.id,
        spec: it.spec,
        template_id: it.template_id,
        caption: it.caption.clone(),
    }
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("motions"))?;
    fs::create_dir_all(dir.join("exemplars"))?;
    let manifest = Manifest {
        seed: corpus.seed,
        config: corpus.config.clone(),
        items: corpus.items.iter().map(record).collect(),
        exemplars: corpus.exemplars.iter().map(record).collect(),
        train: corpus.train.clone(),
        test: corpus.test.clone(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("manifest.json"))?), &manifest)?;
    for it in &corpus.items {
        let f = File::create(dir.join("motions").join(format!("{:05}.csv", it.id)))?;
        write_raw_csv(&it.motion, BufWriter::new(f))?;
    }
    for (k, it) in corpus.exemplars.iter().enumerate() {
        let f = File::create(dir.join("exemplars").join(format!("{k}.csv")))?;
        write_raw_csv(&it.motion, BufWriter::new(f))?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest =
        serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
    let load = |rec: ItemRecord, path: std::path::PathBuf| -> Result<CorpusItem> {
        let motion = read_raw_csv(BufReader::new(File::open(&path).map_err(|e| {
            Error::Parse(format!("cannot open {}: {e}", path.display()))
        })?))?;
        Ok(CorpusItem {
            id: rec.id,
            spec: rec.spec,
            template_id: rec.template_id,
            caption: rec.caption,
            motion,
            stance: None,
        })
    };
    let items = manifest
        .items
        .into_iter()
        .map(|r| {
            let p = dir.join("motions").join(format!("{:05}.csv", r.id));
            load(r, p)
        })
        .collect::<Result<Vec<_>>>()?;
    let exemplars = manifest
        .exemplars
        .into_iter()
        .enumerate()
        .map(|(k, r)| load(r, dir.join("exemplars").join(format!("{k}.csv"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: manifest.config,
        seed: manifest.seed,
        items,
        train: manifest.train,
        test: manifest.test,
        exemplars,
    })
}
