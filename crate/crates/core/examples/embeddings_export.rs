//! Exports last-block features of one episode before and after adaptation
//! to CSV.
//!
//! `cargo run --example embeddings_export -- [out.csv]`

use std::path::PathBuf;

use cxgrad::analysis::{export_embeddings, write_embeddings_csv, Stage};
use cxgrad::meta::{InnerLoopConfig, LearnerKind, MetaKnowledge};
use cxgrad::nn::ModelConfig;
use cxgrad::tasks::{sample_episode, Split, SyntheticConfig, TaskSource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cxgrad::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("cxgrad-embeddings.csv"), PathBuf::from);
    let source = TaskSource::synthetic(&SyntheticConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let episode = sample_episode(&source, Split::Test, 5, 5, 15, &mut rng)?;
    let meta = MetaKnowledge::init(LearnerKind::Cxgrad, &ModelConfig::default(), &mut rng);
    let cfg = InnerLoopConfig::default();
    let mut rows = export_embeddings(&meta, &episode, &cfg, Stage::Before)?;
    rows.extend(export_embeddings(&meta, &episode, &cfg, Stage::After)?);
    write_embeddings_csv(&out, &rows)?;
    println!(
        "{} rows of {} features written to {}",
        rows.len(),
        rows[0].features.len(),
        out.display()
    );
    Ok(())
}
