//! Command-line driver for training, evaluation, K-matrix inspection,
//! augmentation, bound verification and the action-shift / Q-gap report.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 bound violation,
//! 3 numerical abort.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use tlda_core::agent::{
    collect_observations, diagnostics, evaluate, train, DiagConfig, SacAgent, TrainMode,
};
use tlda_core::augment::{AugmentKind, AugmentOp};
use tlda_core::error::Error;
use tlda_core::lipschitz::{binarize_mask, k_matrix, tlda_augment, LinearPolicy, Metric, PolicyOracle};
use tlda_core::numerics::{read_checkpoint, ParamStore, Tensor};
use tlda_core::pnm::PnmImage;
use tlda_core::rng::Rng;
use tlda_core::verify::{describe_instance, ensemble_instance, run_ensemble};

pub use config::Config;

pub const ARTIFACT_VERSION: &str = concat!("tlda-cli ", env!("CARGO_PKG_VERSION"));

#[derive(Parser, Debug)]
#[command(name = "tlda", version, about = "Sensitivity-aware augmentation laboratory")]
pub struct Cli {
    /// key = value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "tlda-out")]
    pub out: PathBuf,
    /// Environment steps for `train`.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// tlda, naive_strong, weak_only or random_patch.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Override a single config key, e.g. `--set agent.tau=0.05`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an agent; writes metrics.csv, checkpoints and a manifest.
    Train,
    /// Roll out a checkpoint's deterministic policy under each visual variation.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// K-matrix and preservation mask of a policy on one image.
    Kmatrix {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        metric: Option<String>,
    },
    /// Apply an augmentation (and optionally preservation) to an image.
    Augment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "identity")]
        aug: String,
        /// Preserve the pixels this policy is sensitive to.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check the value-gap bounds over random tabular MDPs.
    Verify {
        #[arg(long)]
        instances: Option<usize>,
        /// Use the identity state map in every instance.
        #[arg(long)]
        identity: bool,
    },
    /// Action shift and Q-estimation gap under weak, strong and preserved augmentation.
    Qgap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Kmatrix { .. } => "kmatrix",
            Command::Augment { .. } => "augment",
            Command::Verify { .. } => "verify",
            Command::Qgap { .. } => "qgap",
        }
    }

    fn checkpoint(&self) -> Option<&Path> {
        match self {
            Command::Eval { checkpoint, .. } | Command::Kmatrix { checkpoint, .. } | Command::Qgap { checkpoint, .. } => {
                Some(checkpoint)
            }
            Command::Augment { checkpoint, .. } => checkpoint.as_deref(),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Violation(String),
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Violation(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Violation(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => Failure::Numerical(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}

/// A loaded checkpoint: parameters plus the config it was trained with.
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: Option<Config>,
}

pub fn load_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    let f = File::open(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let (params, trailer) = read_checkpoint(std::io::BufReader::new(f))
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let config = match trailer {
        Some(t) if !t.trim().is_empty() => Some(
            Config::parse(&t).map_err(|e| Failure::Usage(format!("{} config echo: {e}", path.display())))?,
        ),
        _ => None,
    };
    Ok(Checkpoint { params, config })
}

fn resolve_config(cli: &Cli, ckpt: Option<&Checkpoint>) -> Outcome<Config> {
    let mut cfg = match (&cli.config, ckpt.and_then(|c| c.config.as_ref())) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            Config::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        (None, Some(c)) => c.clone(),
        (None, None) => Config::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k.trim(), v.trim()).map_err(|m| Failure::Usage(format!("--set {o}: {m}")))?;
    }
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(s) = cli.steps {
        cfg.run.steps = s;
    }
    if let Some(m) = &cli.mode {
        cfg.run.mode = m.parse::<TrainMode>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Output directory bookkeeping: every file written is recorded for the manifest.
struct RunDir {
    root: PathBuf,
    files: Vec<String>,
    started: u64,
}

impl RunDir {
    fn create(root: &Path, echo: &str) -> Outcome<Self> {
        fs::create_dir_all(root).map_err(|e| Failure::Usage(format!("{}: {e}", root.display())))?;
        let mut dir = RunDir {
            root: root.to_path_buf(),
            files: Vec::new(),
            started: unix_now(),
        };
        dir.write("config.cfg", echo.as_bytes())?;
        Ok(dir)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.files.push(rel.to_string_lossy().replace('\\', "/"));
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Outcome<()> {
        let p = self.path(name);
        fs::write(&p, bytes)?;
        self.record(&p);
        Ok(())
    }

    fn write_image(&mut self, name: &str, img: &PnmImage) -> Outcome<()> {
        let mut buf = Vec::new();
        img.write(&mut buf)?;
        self.write(name, &buf)
    }

    fn finish(self, command: &str, cfg: &Config, echo: &str) -> Outcome<()> {
        let mut m = String::new();
        let _ = writeln!(m, "artifact_version = {ARTIFACT_VERSION}");
        let _ = writeln!(m, "command = {command}");
        let _ = writeln!(m, "seed = {}", cfg.run.seed);
        let _ = writeln!(m, "mode = {}", cfg.run.mode);
        let _ = writeln!(m, "start = {}", self.started);
        let _ = writeln!(m, "end = {}", unix_now());
        for f in &self.files {
            let _ = writeln!(m, "file = {f}");
        }
        m.push_str("\n[config]\n");
        m.push_str(echo);
        let tmp = self.path("manifest.txt.tmp");
        fs::write(&tmp, m)?;
        fs::rename(&tmp, self.path("manifest.txt"))?;
        Ok(())
    }
}

fn execute(cli: &Cli) -> Outcome<()> {
    let ckpt = cli.command.checkpoint().map(load_checkpoint).transpose()?;
    let cfg = resolve_config(cli, ckpt.as_ref())?;
    let echo = cfg.render();
    let mut dir = RunDir::create(&cli.out, &echo)?;
    match &cli.command {
        Command::Train => cmd_train(&cfg, &echo, &mut dir)?,
        Command::Eval { episodes, .. } => cmd_eval(&cfg, ckpt.as_ref().expect("checkpoint"), *episodes, &mut dir)?,
        Command::Kmatrix { image, stride, metric, .. } => {
            cmd_kmatrix(&cfg, ckpt.as_ref().expect("checkpoint"), image, *stride, metric.as_deref(), &mut dir)?
        }
        Command::Augment { image, aug, .. } => cmd_augment(&cfg, ckpt.as_ref(), image, aug, &mut dir)?,
        Command::Verify { instances, identity } => {
            let verdict = cmd_verify(&cfg, *instances, *identity, &mut dir);
            dir.finish("verify", &cfg, &echo)?;
            return verdict;
        }
        Command::Qgap { samples, .. } => cmd_qgap(&cfg, ckpt.as_ref().expect("checkpoint"), *samples, &mut dir)?,
    }
    dir.finish(cli.command.name(), &cfg, &echo)
}

fn cmd_train(cfg: &Config, echo: &str, dir: &mut RunDir) -> Outcome<()> {
    let tc = cfg.train_config();
    let t0 = Instant::now();
    let result = train(&tc, Some(&dir.root), echo);
    dir.record(&dir.path("metrics.csv"));
    let out = result?;
    for p in &out.outputs.checkpoints {
        dir.record(p);
    }
    let last = out.records.last().map_or(f64::NAN, |r| r.episode_return);
    println!(
        "train mode={} seed={} steps={} episodes={} last_return={last:.3} seconds={:.1}",
        tc.mode,
        tc.seed,
        tc.steps,
        out.records.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Rebuilds the agent stored in `ckpt`; its own config echo fixes the
/// architecture and observation shape.
pub fn load_agent(ckpt: &Checkpoint, fallback: &Config) -> Outcome<(SacAgent, Config)> {
    let own = ckpt.config.clone().unwrap_or_else(|| fallback.clone());
    let shape = own.env.observation_shape();
    let agent = SacAgent::from_state_dict(own.agent.clone(), &shape, 2, &ckpt.params)?;
    Ok((agent, own))
}

fn cmd_eval(cfg: &Config, ckpt: &Checkpoint, episodes: Option<usize>, dir: &mut RunDir) -> Outcome<()> {
    let (agent, own) = load_agent(ckpt, cfg)?;
    let episodes = episodes.unwrap_or(cfg.run.eval_episodes);
    let stats = evaluate(&agent, &own.env, &cfg.run.eval_variations, episodes, cfg.run.seed)?;
    let mut summary = String::from("variation,episodes,mean_return,std_return\n");
    let mut per = String::from("variation,episode,return\n");
    for s in &stats {
        let _ = writeln!(summary, "{},{},{},{}", s.variation, s.returns.len(), s.mean(), s.std());
        for (k, r) in s.returns.iter().enumerate() {
            let _ = writeln!(per, "{},{k},{r}", s.variation);
        }
        println!("{:<20} mean {:8.3} std {:8.3}", s.variation.as_str(), s.mean(), s.std());
    }
    dir.write("eval.csv", summary.as_bytes())?;
    dir.write("eval_episodes.csv", per.as_bytes())
}

/// Either a trained agent or a linear policy stored under `linear.weight` / `linear.bias`.
enum LoadedPolicy {
    Agent(Box<SacAgent>, [usize; 3]),
    Linear(LinearPolicy),
}

impl LoadedPolicy {
    fn load(ckpt: &Checkpoint, cfg: &Config) -> Outcome<Self> {
        if let Some(w) = ckpt.params.get("linear.weight") {
            let bias = ckpt
                .params
                .get("linear.bias")
                .map(|b| b.data().to_vec())
                .unwrap_or_else(|| vec![0.0; w.shape()[0]]);
            let squash = ckpt.params.get("linear.squash").is_some_and(|t| t.data().first().is_some_and(|v| *v != 0.0));
            return Ok(LoadedPolicy::Linear(LinearPolicy::new(w.clone(), bias, squash)?));
        }
        let (agent, own) = load_agent(ckpt, cfg)?;
        Ok(LoadedPolicy::Agent(Box::new(agent), own.env.observation_shape()))
    }

    fn oracle(&self) -> &dyn PolicyOracle {
        match self {
            LoadedPolicy::Agent(a, _) => a.as_ref(),
            LoadedPolicy::Linear(l) => l,
        }
    }

    /// Stacks a `[3, H, W]` image into the policy's observation shape.
    fn observation(&self, frame: &Tensor) -> Outcome<Tensor> {
        let (h, w) = (frame.shape()[1], frame.shape()[2]);
        let copies = match self {
            LoadedPolicy::Agent(_, shape) => {
                if shape[1] != h || shape[2] != w {
                    return Err(Failure::Usage(format!(
                        "image is {w}x{h} but the agent expects {}x{}",
                        shape[2], shape[1]
                    )));
                }
                shape[0] / 3
            }
            LoadedPolicy::Linear(l) => {
                let n = l.weight.shape()[1];
                if n == 0 || n % frame.len() != 0 {
                    return Err(Failure::Usage(format!(
                        "image has {} values, not a divisor of the policy input size {n}",
                        frame.len()
                    )));
                }
                n / frame.len()
            }
        };
        let data: Vec<f32> = (0..copies).flat_map(|_| frame.data().iter().copied()).collect();
        Ok(Tensor::from_vec(&[3 * copies, h, w], data)?)
    }
}

fn read_frame(path: &Path) -> Outcome<Tensor> {
    let f = File::open(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let img = PnmImage::read(std::io::BufReader::new(f)).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if img.channels != 3 {
        return Err(Failure::Usage(format!("{}: expected a colour (P6) image", path.display())));
    }
    Ok(Tensor::from_vec(&[3, img.height, img.width], img.to_planar())?)
}

fn first_frame(obs: &Tensor) -> Outcome<PnmImage> {
    let (h, w) = (obs.shape()[1], obs.shape()[2]);
    Ok(PnmImage::from_planar(3, h, w, &obs.data()[..3 * h * w])?)
}

fn cmd_kmatrix(
    cfg: &Config,
    ckpt: &Checkpoint,
    image: &Path,
    stride: Option<usize>,
    metric: Option<&str>,
    dir: &mut RunDir,
) -> Outcome<()> {
    let policy = LoadedPolicy::load(ckpt, cfg)?;
    let obs = policy.observation(&read_frame(image)?)?;
    let mut kcfg = cfg.tlda;
    if let Some(s) = stride {
        kcfg.stride = s;
    }
    if let Some(m) = metric {
        kcfg.metric = m.parse::<Metric>()?;
    }
    kcfg.validate()?;
    let k = k_matrix(policy.oracle(), &obs, &kcfg)?;
    let mask = binarize_mask(&k);
    dir.write_image("kmatrix.pgm", &PnmImage::new(k.width, k.height, 1, k.to_gray())?)?;
    dir.write_image("mask.pgm", &PnmImage::new(mask.width, mask.height, 1, mask.to_gray())?)?;
    dir.write("kmatrix.kmat", &k.to_raw())?;
    let (ay, ax) = k.argmax();
    println!(
        "kmatrix {}x{} stride {} metric {} argmax ({ay}, {ax}) max {} mean {} preserved {:.3}",
        k.height,
        k.width,
        k.stride,
        k.metric,
        k.get(ay, ax),
        k.mean(),
        mask.fraction()
    );
    Ok(())
}

fn cmd_augment(cfg: &Config, ckpt: Option<&Checkpoint>, image: &Path, aug: &str, dir: &mut RunDir) -> Outcome<()> {
    let frame = read_frame(image)?;
    let mut op = AugmentOp::new(aug.parse::<AugmentKind>()?);
    op.pad = cfg.agent.shift_pad;
    op.alpha = cfg.agent.overlay_alpha;
    let mut rng = Rng::new(cfg.run.seed, "cli.augment");
    match ckpt {
        None => {
            let out = op.apply(&frame, &mut rng)?;
            dir.write_image("augmented.ppm", &first_frame(&out)?)?;
        }
        Some(c) => {
            let policy = LoadedPolicy::load(c, cfg)?;
            let obs = policy.observation(&frame)?;
            let out = tlda_augment(&obs, &op, policy.oracle(), &cfg.tlda, &mut rng)?;
            dir.write_image("augmented.ppm", &first_frame(&out.observation)?)?;
            dir.write_image("mask.pgm", &PnmImage::new(out.mask.width, out.mask.height, 1, out.mask.to_gray())?)?;
            dir.write_image("kmatrix.pgm", &PnmImage::new(out.k.width, out.k.height, 1, out.k.to_gray())?)?;
        }
    }
    println!("augment {} -> {}", op.kind, dir.path("augmented.ppm").display());
    Ok(())
}

pub const VERIFY_HEADER: &str = "id,n_states,n_actions,gamma,horizon,k_pi,sup_distance,lhs_max,coarse_rhs,fine_rhs_max,truncation,coarse_min_slack,fine_min_slack,shift_lhs,shift_rhs,holds";

fn cmd_verify(cfg: &Config, instances: Option<usize>, identity: bool, dir: &mut RunDir) -> Outcome<()> {
    let mut ens = cfg.ensemble_config();
    if let Some(n) = instances {
        ens.instances = n;
    }
    ens.identity_map |= identity;
    let t0 = Instant::now();
    let reports = run_ensemble(&ens, cfg.tlda.exec)?;
    let mut csv = format!("{VERIFY_HEADER}\n");
    let mut failed = Vec::new();
    for r in &reports {
        let b = &r.report;
        let fine_max = b.fine_rhs.iter().cloned().fold(0.0, f64::max);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.id,
            b.n_states,
            b.n_actions,
            b.gamma,
            b.horizon,
            b.k_pi,
            b.sup_distance,
            b.lhs_max(),
            b.coarse_rhs,
            fine_max,
            b.truncation,
            b.coarse_min_slack(),
            b.fine_min_slack(),
            b.shift_bound.lhs,
            b.shift_bound.rhs,
            b.holds()
        );
        if !b.holds() {
            failed.push(r.id);
        }
    }
    dir.write("verify.csv", csv.as_bytes())?;
    if !failed.is_empty() {
        fs::create_dir_all(dir.path("violations"))?;
        for &id in &failed {
            let (mdp, pi, map) = ensemble_instance(&ens, id)?;
            let report = &reports[id].report;
            let text = format!("{}\n{report:#?}\n", describe_instance(&mdp, &pi, &map));
            dir.write(&format!("violations/instance_{id:04}.txt"), text.as_bytes())?;
        }
    }
    println!(
        "verify instances={} failed={} seconds={:.2}",
        reports.len(),
        failed.len(),
        t0.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violation(format!("bounds violated in instances {failed:?}")))
    }
}

pub const QGAP_HEADER: &str = "mode,aug,samples,action_shift_l2,q_mse";

fn cmd_qgap(cfg: &Config, ckpt: &Checkpoint, samples: Option<usize>, dir: &mut RunDir) -> Outcome<()> {
    let (agent, own) = load_agent(ckpt, cfg)?;
    let n = samples.unwrap_or(cfg.run.diag_samples);
    let (obs, actions) = collect_observations(&agent, &own.env, n, cfg.run.seed)?;
    let dcfg = DiagConfig {
        samples: n,
        augs: cfg.run.diag_augs.clone(),
        shift_pad: own.agent.shift_pad,
        overlay_alpha: own.agent.overlay_alpha,
        tlda: cfg.tlda,
        seed: cfg.run.seed,
        ..DiagConfig::default()
    };
    let rows = diagnostics(&agent, &obs, &actions, &dcfg)?;
    let mut csv = format!("{QGAP_HEADER}\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{},{}", r.mode.as_str(), r.aug, r.samples, r.action_shift, r.q_mse);
        println!("{:<7} {:<8} shift {:.5} q_mse {:.6}", r.mode.as_str(), r.aug.as_str(), r.action_shift, r.q_mse);
    }
    dir.write("qgap.csv", csv.as_bytes())
}

/// Writes a linear-policy checkpoint readable by `kmatrix` and `augment`.
pub fn write_linear_checkpoint(path: &Path, policy: &LinearPolicy) -> tlda_core::error::Result<()> {
    let mut store = ParamStore::new();
    store.insert("linear.weight", policy.weight.clone());
    store.insert("linear.bias", Tensor::from_vec(&[policy.bias.len()], policy.bias.clone())?);
    store.insert("linear.squash", Tensor::from_vec(&[1], vec![f32::from(u8::from(policy.squash))])?);
    let w = BufWriter::new(File::create(path)?);
    tlda_core::numerics::write_checkpoint(w, &store, None)
}
