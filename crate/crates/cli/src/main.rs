//! Command-line front end for the mesh-set codec: fit tensors, train the
//! shared decoder, entropy-code, decompress, append shapes, and evaluate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meshcodec::{Error, GridSpec, QuantSpec};

mod manifest;
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "meshcodec", version, about = "Neural mesh-set compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file; defaults used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one TSDF-Def tensor per mesh in a directory
    Fit {
        #[command(flatten)]
        common: Common,
        /// Directory of .obj meshes, processed in lexicographic order
        #[arg(long)]
        mesh_dir: PathBuf,
        /// Output tensor archive (.ncgt)
        #[arg(long)]
        out: PathBuf,
        /// Worker thread count for per-shape parallelism (0 = all cores)
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Train the shared decoder and per-shape features on a tensor archive
    Train {
        #[command(flatten)]
        common: Common,
        /// Input tensor archive (.ncgt)
        #[arg(long)]
        tensors: PathBuf,
        /// Output model-state file
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing model state instead of initializing
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the config epoch count
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Quantize and entropy-code a trained model into a .ncgs bitstream
    Compress {
        #[command(flatten)]
        common: Common,
        /// Input model-state file
        #[arg(long)]
        model: PathBuf,
        /// Output bitstream (.ncgs)
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a .ncgs bitstream back to one OBJ per shape
    Decompress {
        /// Input bitstream (.ncgs)
        #[arg(long)]
        input: PathBuf,
        /// Output mesh directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Append one new shape to an existing bitstream, decoder frozen
    Add {
        #[command(flatten)]
        common: Common,
        /// New mesh (.obj)
        #[arg(long)]
        mesh: PathBuf,
        /// Existing bitstream (.ncgs)
        #[arg(long)]
        input: PathBuf,
        /// Updated bitstream (.ncgs)
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reconstructed meshes against originals, one CSV row per shape
    Eval {
        #[command(flatten)]
        common: Common,
        /// Ground-truth mesh directory
        #[arg(long)]
        orig: PathBuf,
        /// Reconstructed mesh directory
        #[arg(long)]
        recon: PathBuf,
        /// Output CSV
        #[arg(long)]
        out: PathBuf,
        /// Samples per mesh per side
        #[arg(long)]
        n_eval: Option<usize>,
    },
    /// Rate-distortion sweep over decoder widths
    Rd {
        #[command(flatten)]
        common: Common,
        /// Input tensor archive (.ncgt)
        #[arg(long)]
        tensors: PathBuf,
        /// Ground-truth mesh directory
        #[arg(long)]
        mesh_dir: PathBuf,
        /// Output CSV
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Format(_) | Error::Integrity(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(common: &Common) -> meshcodec::Result<meshcodec::config::Config> {
    let mut cfg = match &common.config {
        Some(p) => meshcodec::config::Config::load(p)?,
        None => meshcodec::config::Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Lexicographically ordered .obj paths with their stems.
fn mesh_entries(dir: &Path) -> meshcodec::Result<Vec<(String, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("obj") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("bad mesh filename: {path:?}")))?
            .to_string();
        out.push((stem, path));
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!("no .obj files in {dir:?}")));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn file_size(path: &Path) -> meshcodec::Result<u64> {
    Ok(std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len())
}

fn run(cmd: Command) -> meshcodec::Result<()> {
    match cmd {
        Command::Fit {
            common,
            mesh_dir,
            out,
            workers,
        } => cmd_fit(&common, &mesh_dir, &out, workers),
        Command::Train {
            common,
            tensors,
            out,
            resume,
            epochs,
        } => cmd_train(&common, &tensors, &out, resume.as_deref(), epochs),
        Command::Compress { common, model, out } => cmd_compress(&common, &model, &out),
        Command::Decompress { input, out } => cmd_decompress(&input, &out),
        Command::Add {
            common,
            mesh,
            input,
            out,
        } => cmd_add(&common, &mesh, &input, &out),
        Command::Eval {
            common,
            orig,
            recon,
            out,
            n_eval,
        } => cmd_eval(&common, &orig, &recon, &out, n_eval),
        Command::Rd {
            common,
            tensors,
            mesh_dir,
            out,
        } => cmd_rd(&common, &tensors, &mesh_dir, &out),
    }
}

fn cmd_fit(common: &Common, mesh_dir: &Path, out: &Path, workers: usize) -> meshcodec::Result<()> {
    let cfg = load_config(common)?;
    let entries = mesh_entries(mesh_dir)?;
    let grid = GridSpec::new(cfg.k)?;
    let opts = cfg.fit_options();
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    use rayon::prelude::*;
    let fitted: Vec<meshcodec::Result<meshcodec::fit::FitOutcome>> = entries
        .par_iter()
        .map(|(_, path)| {
            let mesh = meshcodec::mesh::load_obj(path)?;
            meshcodec::fit::fit_tensor(&mesh, grid, &opts)
        })
        .collect();
    let mut tensors = Vec::with_capacity(fitted.len());
    let mut manifest = Manifest::new();
    for ((stem, path), outcome) in entries.iter().zip(fitted) {
        let outcome = outcome?;
        println!(
            "fit {stem}: loss {:.6e} -> {:.6e}",
            outcome.initial_loss, outcome.final_loss
        );
        manifest.push(stem.clone(), file_size(path)?);
        tensors.push(outcome.tensor);
    }
    meshcodec::grid::save_archive(&tensors, out)?;
    manifest.save(&Manifest::sidecar(out))?;
    println!("wrote {} tensors to {}", tensors.len(), out.display());
    Ok(())
}

fn cmd_train(
    common: &Common,
    tensors_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    epochs: Option<usize>,
) -> meshcodec::Result<()> {
    let cfg = load_config(common)?;
    let tensors = meshcodec::grid::load_archive(tensors_path)?;
    let arch = cfg.arch()?;
    if arch.output_resolution() != tensors[0].grid.resolution {
        return Err(Error::Shape(format!(
            "config decodes to K={} but archive holds K={}",
            arch.output_resolution(),
            tensors[0].grid.resolution
        )));
    }
    let tc = cfg.train_config();
    let epochs = epochs.unwrap_or(tc.epochs);
    let mut state = match resume {
        Some(p) => meshcodec::train::load_model(p)?,
        None => meshcodec::train::init_model(&arch, tensors.len(), &tc),
    };
    meshcodec::train::train_epochs(&mut state, &tensors, &tc, epochs)?;
    meshcodec::train::save_model(&state, out)?;
    let loss_csv = out.with_extension("loss.csv");
    let mut body = String::from("epoch,loss\n");
    for (i, l) in state.loss_history.iter().enumerate() {
        body.push_str(&format!("{},{l:.9e}\n", i + 1));
    }
    std::fs::write(&loss_csv, body).map_err(|e| Error::io(&loss_csv, e))?;
    if let Some(last) = state.loss_history.last() {
        println!("trained {} epochs, final loss {last:.6e}", state.epochs_done);
    }
    let names = Manifest::sidecar(tensors_path);
    if names.exists() {
        Manifest::load(&names)?.save(&Manifest::sidecar(out))?;
    }
    Ok(())
}

fn cmd_compress(common: &Common, model: &Path, out: &Path) -> meshcodec::Result<()> {
    let cfg = load_config(common)?;
    let state = meshcodec::train::load_model(model)?;
    let fq = QuantSpec::symmetric(cfg.n_feat);
    let pq = QuantSpec::symmetric(cfg.n_param);
    let (features, params) = state.best();
    let compressed =
        meshcodec::container::compress_set(features, params, &state.arch, &fq, &pq, out)?;
    let names = Manifest::sidecar(model);
    let original = if names.exists() {
        let m = Manifest::load(&names)?;
        m.save(&Manifest::sidecar(out))?;
        m.total_bytes()
    } else {
        0
    };
    let report = meshcodec::container::CompressionReport::new(original, compressed);
    println!(
        "original {:.3} MB, compressed {:.3} MB, ratio {:.2}",
        report.original_bytes as f64 / 1e6,
        report.compressed_bytes as f64 / 1e6,
        report.ratio
    );
    Ok(())
}

fn cmd_decompress(input: &Path, out: &Path) -> meshcodec::Result<()> {
    let set = meshcodec::container::decompress_set(input)?;
    let meshes = meshcodec::container::decode_meshes(&set)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let names = Manifest::sidecar(input);
    let stems: Vec<String> = if names.exists() {
        let m = Manifest::load(&names)?;
        if m.len() != meshes.len() {
            return Err(Error::Format(format!(
                "manifest lists {} shapes, bitstream holds {}",
                m.len(),
                meshes.len()
            )));
        }
        m.stems().to_vec()
    } else {
        (0..meshes.len()).map(|i| format!("shape_{i:03}")).collect()
    };
    for (stem, mesh) in stems.iter().zip(&meshes) {
        let path = out.join(format!("{stem}.obj"));
        meshcodec::mesh::save_obj(mesh, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_add(common: &Common, mesh_path: &Path, input: &Path, out: &Path) -> meshcodec::Result<()> {
    let cfg = load_config(common)?;
    let set = meshcodec::container::decompress_set(input)?;
    let grid = GridSpec::new(set.arch.output_resolution())?;
    let mesh = meshcodec::mesh::load_obj(mesh_path)?;
    let fitted = meshcodec::fit::fit_tensor(&mesh, grid, &cfg.fit_options())?;

    let mut tc = cfg.train_config();
    tc.feat_quant = set.feat_quant;
    tc.param_quant = set.param_quant;
    // frozen-decoder state: only arch and params are consulted
    let mut state = meshcodec::train::init_model(&set.arch, 0, &tc);
    state.params = set.params.clone();
    let feature = meshcodec::train::fit_new_feature(&fitted.tensor, &state, &tc)?;

    let mut features = set.features.clone();
    features.push(feature.clone());
    let compressed = meshcodec::container::compress_set(
        &features,
        &set.params,
        &set.arch,
        &set.feat_quant,
        &set.param_quant,
        out,
    )?;

    let stem = mesh_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("added")
        .to_string();
    let names = Manifest::sidecar(input);
    let mut manifest = if names.exists() {
        Manifest::load(&names)?
    } else {
        let mut m = Manifest::new();
        for i in 0..set.features.len() {
            m.push(format!("shape_{i:03}"), 0);
        }
        m
    };
    manifest.push(stem.clone(), file_size(mesh_path)?);
    manifest.save(&Manifest::sidecar(out))?;

    let decoded = meshcodec::train::decode_feature(&feature, &state, &tc)?;
    let recon = meshcodec::mc::dmc_extract(&decoded);
    let rec = meshcodec::metrics::evaluate_pair(&recon, &mesh, cfg.n_eval, cfg.seed)?;
    println!(
        "added {stem}: {} shapes, {compressed} bytes, cd {:.6e}",
        features.len(),
        rec.cd
    );
    Ok(())
}

fn cmd_eval(
    common: &Common,
    orig: &Path,
    recon: &Path,
    out: &Path,
    n_eval: Option<usize>,
) -> meshcodec::Result<()> {
    let cfg = load_config(common)?;
    let n_eval = n_eval.unwrap_or(cfg.n_eval);
    let orig_entries = mesh_entries(orig)?;
    let recon_entries = mesh_entries(recon)?;
    if orig_entries.len() != recon_entries.len() {
        return Err(Error::InvalidArgument(format!(
            "{} original vs {} reconstructed meshes",
            orig_entries.len(),
            recon_entries.len()
        )));
    }
    let label = recon
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("recon");
    let mut body = String::from("label,shape_id,cd,nc,f1_005,f1_01\n");
    for ((o_stem, o_path), (r_stem, r_path)) in orig_entries.iter().zip(&recon_entries) {
        if o_stem != r_stem {
            return Err(Error::InvalidArgument(format!(
                "shape mismatch: {o_stem} vs {r_stem}"
            )));
        }
        let gt = meshcodec::mesh::load_obj(o_path)?;
        let rc = meshcodec::mesh::load_obj(r_path)?;
        let m = meshcodec::metrics::evaluate_pair(&rc, &gt, n_eval, cfg.seed)?;
        println!(
            "{o_stem}: cd {:.6e} nc {:.4} f1(0.005) {:.4} f1(0.01) {:.4}",
            m.cd, m.nc, m.f1_005, m.f1_01
        );
        body.push_str(&format!(
            "{label},{o_stem},{:.9},{:.9},{:.9},{:.9}\n",
            m.cd, m.nc, m.f1_005, m.f1_01
        ));
    }
    std::fs::write(out, body).map_err(|e| Error::io(out, e))?;
    Ok(())
}

fn cmd_rd(common: &Common, tensors_path: &Path, mesh_dir: &Path, out: &Path) -> meshcodec::Result<()> {
    let cfg = load_config(common)?;
    let tensors = meshcodec::grid::load_archive(tensors_path)?;
    let entries = mesh_entries(mesh_dir)?;
    if entries.len() != tensors.len() {
        return Err(Error::InvalidArgument(format!(
            "{} meshes vs {} tensors",
            entries.len(),
            tensors.len()
        )));
    }
    let meshes: Vec<_> = entries
        .iter()
        .map(|(_, p)| meshcodec::mesh::load_obj(p))
        .collect::<meshcodec::Result<_>>()?;
    let original: u64 = entries
        .iter()
        .map(|(_, p)| file_size(p))
        .sum::<meshcodec::Result<u64>>()?;
    let tc = cfg.train_config();
    let tmp = out.with_extension("ncgs.tmp");
    let mut points = Vec::new();
    for factor in [4usize, 2, 1] {
        let widths: Vec<usize> = cfg.widths.iter().map(|w| (w / factor).max(1)).collect();
        let head = (cfg.head_width / factor).max(1);
        let arch = meshcodec::decoder::DecoderArch::standard(cfg.k_prime, cfg.c, head, &widths)?;
        let state = meshcodec::train::train_set(&tensors, &arch, &tc)?;
        let (sweep_features, sweep_params) = state.best();
        let compressed = meshcodec::container::compress_set(
            sweep_features,
            sweep_params,
            &arch,
            &tc.feat_quant,
            &tc.param_quant,
            &tmp,
        )?;
        let set = meshcodec::container::decompress_set(&tmp)?;
        let recon = meshcodec::container::decode_meshes(&set)?;
        let mut sum = meshcodec::metrics::MetricsRecord {
            cd: 0.0,
            nc: 0.0,
            f1_005: 0.0,
            f1_01: 0.0,
        };
        for (rc, gt) in recon.iter().zip(&meshes) {
            // an undertrained decoder can miss the surface entirely; score
            // that as worst-case distortion over the [-1,1]^3 domain
            let m = if rc.faces.is_empty() {
                meshcodec::metrics::MetricsRecord {
                    cd: 2.0 * 3.0f64.sqrt(),
                    nc: 0.0,
                    f1_005: 0.0,
                    f1_01: 0.0,
                }
            } else {
                meshcodec::metrics::evaluate_pair(rc, gt, cfg.n_eval, cfg.seed)?
            };
            sum.cd += m.cd;
            sum.nc += m.nc;
            sum.f1_005 += m.f1_005;
            sum.f1_01 += m.f1_01;
        }
        let n = recon.len() as f64;
        sum.cd /= n;
        sum.nc /= n;
        sum.f1_005 /= n;
        sum.f1_01 /= n;
        let ratio = original as f64 / compressed as f64;
        println!("width/{factor}: ratio {ratio:.2}, cd {:.6e}", sum.cd);
        points.push(meshcodec::metrics::RdPoint {
            label: format!("width-1/{factor}"),
            ratio,
            distortion: sum,
        });
    }
    let _ = std::fs::remove_file(&tmp);
    meshcodec::metrics::emit_rd(&points, out)?;
    Ok(())
}
