use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use orbiconv::experiments::config::{
    self, Config, DataSource, COMPARE_KEYS, DATA_KEYS, MODEL_KEYS, ROBUSTNESS_KEYS, SEARCH_KEYS, TRAIN_KEYS,
};
use orbiconv::experiments::{compare_kernels, robustness_eval, Manifest, Split, SyntheticKind};
use orbiconv::gradcheck::{layer_suite, GradCheckConfig};
use orbiconv::identity::verify_delta_identity;
use orbiconv::nas::{genotype_to_dot, search};
use orbiconv::nn::layers::Sequential;
use orbiconv::nn::models::{small_cnn, CnnConfig};
use orbiconv::train::train;
use orbiconv::{geometry, Error, KernelShape, Result, Tensor, TransformMatrix};
use rand::{Rng, SeedableRng};

#[derive(Parser)]
#[command(name = "orbiconv", version, about = "Circular-kernel convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    /// Keys from every section are accepted so one file can drive several commands.
    fn load(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            c.set(k.trim(), v.trim());
        }
        let known: Vec<&str> = [DATA_KEYS, TRAIN_KEYS, MODEL_KEYS, COMPARE_KEYS, ROBUSTNESS_KEYS, SEARCH_KEYS]
            .iter().flat_map(|k| k.iter().copied()).collect();
        c.ensure_known(&known)?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample points of a square or circular kernel as `index,x,y,ring`.
    Geometry {
        #[arg(long)]
        size: usize,
        #[arg(long, default_value = "circular")]
        mode: KernelShape,
        #[arg(long, default_value_t = 1)]
        dilation: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Non-zero entries of the transformation matrix as `row,col,value`.
    Transform {
        #[arg(long)]
        size: usize,
        #[arg(long, default_value = "circular")]
        mode: KernelShape,
        #[arg(long, default_value_t = 1)]
        dilation: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every layer type.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        /// Entries checked per parameter tensor; all when omitted.
        #[arg(long)]
        max_entries: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic dataset written as two ORBT tensors.
    GenData {
        #[arg(long)]
        kind: SyntheticKind,
        /// Samples per class.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Trains the reference CNN; writes the epoch log and the weights.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Square vs circular vs integrated kernels across sizes and seeds.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Test error under random rotations or shears.
    Robustness {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Weights saved by `train`; trains from the config when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Differentiable architecture search on the configured data.
    Search {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dot: PathBuf,
        /// Per-epoch losses as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Checks that the three ways of computing the output change agree.
    IdentityCheck {
        #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        dilations: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Side of the random test images.
        #[arg(long, default_value_t = 12)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, contents: &str, manifest: &mut Manifest) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    manifest.add_output(path)
}

/// Shortest decimal of `v` rounded to 15 significant digits.
fn sig15(v: f64) -> f64 {
    format!("{v:.14e}").parse::<f64>().expect("formatted float parses") + 0.0
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn model_for(c: &Config, data: &orbiconv::experiments::Dataset, seed: u64) -> Result<Sequential<f32>> {
    let (ch, _, _) = data.image_dims();
    let cfg = CnnConfig { in_channels: ch, num_classes: data.num_classes(), ..config::cnn_config(c)? };
    small_cnn(&cfg, seed)
}

fn run(command: Command, args: Vec<String>) -> Result<()> {
    match command {
        Command::Geometry { size, mode, dilation, out } => {
            let pts = geometry::points_for(mode, size, dilation)?;
            let mut csv = String::from("index,x,y,ring\n");
            for (i, (p, r)) in pts.points().iter().zip(pts.rings()).enumerate() {
                let _ = writeln!(csv, "{i},{},{},{r}", sig15(p.x), sig15(p.y));
            }
            let mut m = Manifest::new("geometry", args);
            write(&out, &csv, &mut m)?;
            m.write(&manifest_path(&out))
        }
        Command::Transform { size, mode, dilation, out } => {
            let b = TransformMatrix::for_shape(mode, size, dilation)?;
            let mut csv = String::from("row,col,value\n");
            for r in 0..b.dim() {
                for (c, v) in b.row(r) {
                    let _ = writeln!(csv, "{r},{c},{v}");
                }
            }
            let mut m = Manifest::new("transform", args);
            write(&out, &csv, &mut m)?;
            m.write(&manifest_path(&out))
        }
        Command::CheckGrad { seed, eps, tolerance, max_entries, out } => {
            let cfg = GradCheckConfig { eps, tolerance, max_entries };
            let suite = layer_suite(seed, &cfg)?;
            let mut csv = String::from("layer,tensor,entries,max_abs_err,rel_err,passed\n");
            for e in &suite {
                for t in &e.report.tensors {
                    let _ = writeln!(csv, "{},{},{},{},{},{}", e.layer, t.name, t.entries, t.max_abs_err, t.rel_err, t.rel_err < tolerance);
                }
            }
            let mut m = Manifest::new("check-grad", args).with_seed(seed);
            write(&out, &csv, &mut m)?;
            m.write(&manifest_path(&out))?;
            let failed: Vec<&str> = suite.iter().filter(|e| !e.report.passed()).map(|e| e.layer.as_str()).collect();
            for e in &suite {
                println!("{:<28} max rel err {:.3e}", e.layer, e.report.max_rel_err());
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::GenData { kind, n, size, seed, images, labels } => {
            if size < 8 {
                return Err(Error::Config(format!("--size must be at least 8, got {size}")));
            }
            let d = orbiconv::experiments::gen_synthetic(kind, n, size, seed)?;
            for p in [&images, &labels] {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
            }
            d.save_orbt(&images, &labels)?;
            let mut m = Manifest::new("gen-data", args).with_seed(seed);
            m.add_output(&images)?;
            m.add_output(&labels)?;
            m.write(&manifest_path(&images))
        }
        Command::Train { cfg, out_dir } => {
            let c = cfg.load()?;
            let tc = config::train_config(&c)?;
            let (tr, te) = DataSource::from_config(&c)?.load(Split::Test)?;
            let mut model = model_for(&c, &tr, tc.seed)?;
            let report = train(&mut model, &tr, Some(&te), &tc)?;
            let mut m = Manifest::new("train", args).with_config(&c).with_seed(tc.seed);
            write(&out_dir.join("train.csv"), &report.to_csv(), &mut m)?;
            let wdir = out_dir.join("weights");
            model.store.save_dir(&wdir)?;
            let mut files: Vec<PathBuf> = std::fs::read_dir(&wdir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
            files.sort();
            for f in files {
                m.add_output(&f)?;
            }
            m.write(&out_dir.join("manifest.json"))?;
            if let Some(e) = report.final_test_err() {
                println!("final test error {e:.4}");
            }
            Ok(())
        }
        Command::Compare { cfg, out_dir } => {
            let c = cfg.load()?;
            let cc = config::compare_config(&c)?;
            let (tr, te) = DataSource::from_config(&c)?.load(Split::Test)?;
            let report = compare_kernels(&cc, &tr, &te)?;
            let mut m = Manifest::new("compare", args).with_config(&c);
            write(&out_dir.join("compare.csv"), &report.to_csv(), &mut m)?;
            write(&out_dir.join("summary.csv"), &report.summary_csv(), &mut m)?;
            write(&out_dir.join("compare.svg"), &report.to_svg(), &mut m)?;
            m.write(&out_dir.join("manifest.json"))?;
            print!("{}", report.summary_csv());
            Ok(())
        }
        Command::Robustness { cfg, weights, out } => {
            let c = cfg.load()?;
            let sweep = config::robustness_sweep(&c)?;
            let tc = config::train_config(&c)?;
            let (tr, te) = DataSource::from_config(&c)?.load(Split::Test)?;
            let mut model = model_for(&c, &tr, tc.seed)?;
            match &weights {
                Some(dir) => model.store.load_dir(dir)?,
                None => {
                    train(&mut model, &tr, Some(&te), &tc)?;
                }
            }
            let table = robustness_eval(&model, &te, &sweep)?;
            let mut m = Manifest::new("robustness", args).with_config(&c).with_seed(sweep.seed);
            write(&out, &table.to_csv(), &mut m)?;
            m.write(&manifest_path(&out))?;
            for s in &table.summary {
                println!("{} a={:<2} mean {:.4} std {:.4}", table.mode, s.a, s.mean_err, s.std_err);
            }
            Ok(())
        }
        Command::Search { cfg, out, dot, log } => {
            let c = cfg.load()?;
            let sc = config::search_config(&c)?;
            let (tr, va) = DataSource::from_config(&c)?.load(Split::Val)?;
            let outcome = search::<f32>(&tr, &va, &sc)?;
            let json = match outcome.genotypes.as_slice() {
                [g] => g.to_json(),
                gs => serde_json::to_string_pretty(gs).expect("genotypes serialize"),
            };
            let dots: String = outcome.genotypes.iter().map(genotype_to_dot).collect();
            let mut m = Manifest::new("search", args).with_config(&c).with_seed(sc.seed);
            write(&out, &(json + "\n"), &mut m)?;
            write(&dot, &dots, &mut m)?;
            if let Some(log) = &log {
                write(log, &outcome.report.to_csv(), &mut m)?;
            }
            m.write(&manifest_path(&out))?;
            if let Some(d) = outcome.report.val_loss_drop() {
                println!("validation loss drop {:.1}%", 100.0 * d);
            }
            Ok(())
        }
        Command::IdentityCheck { sizes, dilations, trials, image_size, seed, tolerance, out } => {
            let mut rng = orbiconv::rng::SplitMix64::seed_from_u64(seed);
            let mut csv = String::from("K,dilation,trial,direct,receptive_field,kernel_space,max_rel_gap\n");
            let mut worst = 0.0f64;
            for &k in &sizes {
                for &d in &dilations {
                    let b = TransformMatrix::circular(k, d)?;
                    for trial in 0..trials {
                        let n = image_size;
                        let img = Tensor::from_vec(&[1, 1, n, n], (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
                        let w0: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let w1: Vec<f64> = w0.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
                        let r = verify_delta_identity(&img, &w0, &w1, &b)?;
                        let gap = r.max_relative_gap();
                        worst = worst.max(gap);
                        let _ = writeln!(csv, "{k},{d},{trial},{},{},{},{gap}", r.direct, r.receptive_field, r.kernel_space);
                    }
                }
            }
            let mut m = Manifest::new("identity-check", args).with_seed(seed);
            write(&out, &csv, &mut m)?;
            m.write(&manifest_path(&out))?;
            println!("largest relative gap {worst:.3e}");
            if worst < tolerance {
                Ok(())
            } else {
                Err(Error::Numerical(format!("relative gap {worst:e} exceeds {tolerance:e}")))
            }
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match run(cli.command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
