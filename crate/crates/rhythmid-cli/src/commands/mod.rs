pub mod eval_cmd;
pub mod facs_cmd;
pub mod gradcheck_cmd;
pub mod synth_cmd;
pub mod train_cmd;
pub mod vocab_cmd;

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::Context;
use rhythmid::facs::Vocabulary;

pub(crate) fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

pub(crate) fn load_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    Vocabulary::load(open(path)?).with_context(|| format!("loading vocabulary {}", path.display()))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    rhythmid::util::atomic_write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
}
