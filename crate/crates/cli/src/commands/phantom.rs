use metgan_core::data::{export_dataset, make_phantom_corpus, Channel, PhantomConfig};
use serde::Serialize;

use crate::run::RunContext;

#[derive(Serialize)]
struct PhantomManifest {
    phantom: PhantomConfig,
    n_samples: usize,
    n_with_lesions: usize,
}

pub fn run(ctx: &mut RunContext) -> anyhow::Result<()> {
    let mut cfg = ctx.manifest.require(&ctx.manifest.manifest.phantom, "phantom")?.clone();
    if let Some(seed) = ctx.manifest.manifest.seed {
        cfg.seed = seed;
    }
    let corpus = make_phantom_corpus(&cfg)?;
    export_dataset(&ctx.out, &corpus)?;
    for s in &corpus {
        for ch in Channel::ALL {
            ctx.record(format!("{}/{}.png", ch.dir_name(), s.id));
        }
    }
    let n_with_lesions = corpus.iter().filter(|s| s.has_lesion()).count();
    log::info!("{} phantom samples, {n_with_lesions} with lesions", corpus.len());
    ctx.write_json(
        "manifest.json",
        &PhantomManifest {
            phantom: cfg,
            n_samples: corpus.len(),
            n_with_lesions,
        },
    )
}
