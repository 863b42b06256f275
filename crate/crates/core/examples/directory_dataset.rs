//! Builds a small `root/{train,val,test}/<class>/*.pgm` tree from synthetic
//! classes, loads it back as a task source and samples an episode.
//!
//! `cargo run --example directory_dataset -- [root]` loads an existing tree
//! when `root` is given.

use std::path::PathBuf;

use cxgrad::tasks::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build(root: &std::path::Path) -> cxgrad::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut class = 0;
    for (split, n_classes) in [("train", 8), ("val", 5), ("test", 5)] {
        for c in 0..n_classes {
            let dir = root.join(split).join(format!("class{c:02}"));
            std::fs::create_dir_all(&dir).map_err(|e| cxgrad::Error::InvalidInput(e.to_string()))?;
            let spec = SyntheticClassSpec::new(Family::Pattern, class, 7, 0.5, 40);
            let images = generate_synthetic_class(&spec, 6, &mut rng)?;
            for i in 0..6 {
                let img = cxgrad::autodiff::Array::new(vec![1, 40, 40], images.data()[i * 1600..(i + 1) * 1600].to_vec())?;
                write_pgm(&dir.join(format!("{i:03}.pgm")), &img)?;
            }
            class += 1;
        }
    }
    Ok(())
}

fn main() -> cxgrad::Result<()> {
    let root = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let root = std::env::temp_dir().join("cxgrad-directory-dataset");
            build(&root)?;
            root
        }
    };
    // images are center-cropped and resized to 32×32 on load
    let source = load_directory_dataset(&root, 1, 32)?;
    source.assert_disjoint();
    for split in Split::ALL {
        println!("{split}: {} classes", source.classes(split).len());
    }
    let episode = sample_episode(&source, Split::Test, 5, 1, 4, &mut ChaCha8Rng::seed_from_u64(1))?;
    let names: Vec<&str> = episode.classes.iter().map(|&c| source.class_names[c].as_str()).collect();
    println!("episode classes {names:?}, support {:?}", episode.support.images.shape());
    Ok(())
}
