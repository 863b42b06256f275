//! Samples N-way K-shot episodes from the synthetic generator, writes the
//! support images as PGM files and round-trips a batch through the episode
//! cache.
//!
//! `cargo run --example episode_sampling -- [out_dir]`

use std::path::PathBuf;

use cxgrad::tasks::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cxgrad::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("cxgrad-episodes"), PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|e| cxgrad::Error::InvalidInput(e.to_string()))?;
    for family in [Family::Pattern, Family::Gaussian] {
        let source = TaskSource::synthetic(&SyntheticConfig {
            family,
            ..SyntheticConfig::default()
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let episode = sample_episode(&source, Split::Train, 5, 2, 3, &mut rng)?;
        println!(
            "{family:?}: classes {:?}, support {:?}, query {:?}",
            episode.classes,
            episode.support.images.shape(),
            episode.query.images.shape()
        );
        let per = source.image_dims();
        let px = per.0 * per.1 * per.2;
        for (i, id) in episode.support.ids.iter().enumerate() {
            let img = cxgrad::autodiff::Array::new(vec![1, per.1, per.2], episode.support.images.data()[i * px..(i + 1) * px].to_vec())?;
            write_pgm(
                &out.join(format!(
                    "{family:?}-label{}-class{}-{}.pgm",
                    episode.support.labels[i], id.class, id.index
                )),
                &img,
            )?;
        }
        let batch: Vec<Episode> = (0..8)
            .map(|_| sample_episode(&source, Split::Val, 5, 1, 15, &mut rng))
            .collect::<cxgrad::Result<_>>()?;
        let path = out.join(format!("{family:?}.episodes"));
        write_episode_cache(&path, &batch)?;
        let (header, back) = read_episode_cache(&path)?;
        println!("  cache {}: {header:?}, identical: {}", path.display(), back == batch);
    }
    println!("images in {}", out.display());
    Ok(())
}
