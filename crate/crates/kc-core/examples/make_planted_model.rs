//! Writes the planted GPT-2-small-shaped demo checkpoint to a directory so
//! the `kc` CLI can run against it:
//!
//! ```text
//! cargo run --release -p kc-core --example make_planted_model -- /tmp/planted
//! kc --model-dir /tmp/planted discover \
//!     --dataset crates/kc-core/fixtures/data/country_capital.jsonl \
//!     --tau 0.01 --out circuit.json
//! ```

use std::path::{Path, PathBuf};

use kc_core::bpe::BpeTokenizer;
use kc_core::synthetic::desk;

fn main() -> anyhow::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "planted-model".to_owned())
        .into();
    std::fs::create_dir_all(&out)?;

    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/tokenizer");
    for name in ["vocab.json", "merges.txt"] {
        std::fs::copy(fixtures.join(name), out.join(name))?;
    }
    let tokenizer = BpeTokenizer::from_files(out.join("vocab.json"), out.join("merges.txt"))?;
    eprintln!("building the planted checkpoint (12 layers, 12 heads, d_model 768)...");
    let (config, weights, _info) = desk::build(&tokenizer)?;
    std::fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&config)? + "\n",
    )?;
    kc_core::weights::save_weights(&config, &weights, out.join("model.safetensors"))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}
