use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use super::{manifest_hash, stamp, write_json};
use crate::data::{add_random_categories, synth_gaussian_mixture};
use crate::error::Result;

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenArgs {
    /// Output CSV path.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Schema JSON path (default: `<out>.schema.json`).
    #[arg(long)]
    #[serde(skip)]
    pub schema_out: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub features: usize,
    /// Distance between consecutive class means.
    #[arg(long, default_value_t = 2.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    /// Extra uniformly drawn categorical columns.
    #[arg(long, default_value_t = 0)]
    pub categorical: usize,
    /// Levels per categorical column.
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl GenArgs {
    pub fn schema_path(&self) -> PathBuf {
        self.schema_out.clone().unwrap_or_else(|| {
            let mut s = self.out.as_os_str().to_owned();
            s.push(".schema.json");
            PathBuf::from(s)
        })
    }
}

#[derive(Serialize)]
struct SchemaFile<'a> {
    #[serde(flatten)]
    schema: &'a crate::data::Schema,
    seed: u64,
    manifest: &'a str,
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let mut ds = synth_gaussian_mixture(args.classes, args.features, args.separation, args.samples, args.seed)?;
    if args.categorical > 0 {
        add_random_categories(&mut ds, args.categorical, args.levels, args.seed)?;
    }
    let manifest = manifest_hash("gen", args)?;
    let mut bytes = stamp("gen", &args.seed.to_string(), &manifest).into_bytes();
    ds.write_csv_to(&mut bytes)?;
    crate::io::write_atomic(&args.out, &bytes)?;
    let schema = ds.schema();
    write_json(
        &args.schema_path(),
        &SchemaFile {
            schema: &schema,
            seed: args.seed,
            manifest: &manifest,
        },
    )?;
    log::info!("wrote {} samples to {}", ds.len(), args.out.display());
    Ok(())
}
