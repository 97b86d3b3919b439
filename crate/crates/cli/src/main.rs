use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;

use specdec::codebook::{brute_force_neighbors, build_neighbor_index, synthesize_codebook, Codebook};
use specdec::harness::{load_config_with, load_workload, replace_demo, run_experiment, validate_config_with, Overrides};
use specdec::oracle::run_suite;
use specdec::prob::{rng_from_seed, TokenId};
use specdec::{DecodeMode, HarnessError, ProximityMeasureKind};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "specdec", version, about = "Speculative decoding experiments with relaxed acceptance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep and write stats.csv, config.resolved and optional traces.
    Run {
        /// TOML config; omit to run the defaults.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Enumerate single verification steps and report worst deviations.
    Oracle {
        #[arg(long, default_value_t = 1000)]
        vanilla: usize,
        #[arg(long, default_value_t = 200)]
        lantern: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the neighbour index against brute force.
    KnnCheck {
        /// Check this codebook instead of random ones.
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Neighbourhood size for --codebook (defaults to V).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value_t = Measure::L2)]
        measure: Measure,
        #[arg(long, default_value_t = 0)]
        measure_seed: u64,
        /// Number of random codebooks.
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        max_vocab: usize,
        #[arg(long, default_value_t = 16)]
        max_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample from the target, swap each token for a random near neighbour,
    /// and report how far the next-token laws move.
    ReplaceDemo {
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        len: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Vanilla,
    Lantern,
}

#[derive(Clone, Copy, ValueEnum)]
enum Measure {
    L2,
    Cosine,
    Random,
}

impl Measure {
    fn kind(self, seed: u64) -> ProximityMeasureKind {
        match self {
            Measure::L2 => ProximityMeasureKind::L2,
            Measure::Cosine => ProximityMeasureKind::Cosine,
            Measure::Random => ProximityMeasureKind::Random { seed },
        }
    }
}

impl OverrideArgs {
    fn to_overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            mode: self.mode.map(|m| match m {
                Mode::Vanilla => DecodeMode::Vanilla,
                Mode::Lantern => DecodeMode::Lantern,
            }),
        }
    }
}

fn config(path: Option<&PathBuf>, o: &Overrides) -> Result<specdec::ExperimentConfig, HarnessError> {
    match path {
        Some(p) => load_config_with(p, o),
        None => validate_config_with("", o),
    }
}

fn fail(e: &HarnessError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn cmd_run(path: Option<&PathBuf>, o: &OverrideArgs) -> ExitCode {
    let cfg = match config(path, &o.to_overrides()) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    match run_experiment(&cfg) {
        Ok(s) => {
            for (cell, r) in &s.rows {
                println!(
                    "k={} delta={} tau={} gamma={} mal={:.4} accept={:.4}",
                    cell.k, cell.delta, cell.tau, cell.gamma, r.mean_accepted_length, r.avg_accept_prob_first_draft
                );
            }
            println!("wrote {}", s.out_dir.join("stats.csv").display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn cmd_oracle(vanilla: usize, lantern: usize, seed: u64) -> ExitCode {
    let r = match run_suite(vanilla, lantern, seed) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CHECK);
        }
    };
    println!("vanilla instances            {}", r.vanilla_instances);
    println!("lantern instances            {}", r.lantern_instances);
    println!("vanilla max tvd(law, q)      {:.3e}", r.vanilla_max_tvd);
    println!("candidate law max deviation  {:.3e}", r.candidate_max_dev);
    println!("mixture min slack to delta   {:.4}", r.mixture_min_slack);
    println!("reduction max deviation      {:.3e}", r.reduction_max_dev);
    println!("closed-form max deviation    {:.3e}", r.closed_form_max_dev);
    println!("sets strictly below delta    {}", r.all_strict);
    println!("realized law beyond delta    {}/{}", r.realized_exceed, r.lantern_instances);
    if r.passes() {
        println!("oracle checks passed");
        ExitCode::SUCCESS
    } else {
        println!("oracle checks FAILED");
        ExitCode::from(EXIT_CHECK)
    }
}

fn check_one(cb: &Codebook, k: usize, m: ProximityMeasureKind) -> Result<usize, specdec::codebook::CodebookError> {
    let idx = build_neighbor_index(cb, k, m)?;
    let brute = brute_force_neighbors(cb, k, m)?;
    Ok(brute
        .iter()
        .enumerate()
        .filter(|(t, want)| idx.neighbors(TokenId::from(*t)) != want.as_slice())
        .count())
}

#[allow(clippy::too_many_arguments)]
fn cmd_knn(
    codebook: Option<&PathBuf>,
    k: Option<usize>,
    measure: Measure,
    measure_seed: u64,
    count: usize,
    max_vocab: usize,
    max_dim: usize,
    seed: u64,
) -> ExitCode {
    let m = measure.kind(measure_seed);
    let mut total = 0;
    let mut bad = 0;
    if let Some(path) = codebook {
        let cb = match Codebook::load(path) {
            Ok(cb) => cb,
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(EXIT_IO);
            }
        };
        total = cb.vocab_size();
        match check_one(&cb, k.unwrap_or(cb.vocab_size()), m) {
            Ok(n) => bad = n,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        }
    } else {
        if max_vocab < 2 || max_dim < 1 {
            eprintln!("error: --max-vocab must be >= 2 and --max-dim >= 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        let mut rng = rng_from_seed(seed);
        for _ in 0..count {
            let v = rng.random_range(2..=max_vocab);
            let d = rng.random_range(1..=max_dim);
            let k = rng.random_range(1..=v);
            let cb = synthesize_codebook(v, d, rng.random(), false);
            total += v;
            bad += check_one(&cb, k, m).expect("random codebooks have no zero rows");
        }
    }
    println!("neighbour lists checked {total}, mismatches {bad}");
    if bad == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK)
    }
}

fn cmd_replace(path: Option<&PathBuf>, k: usize, len: usize, seed: Option<u64>) -> ExitCode {
    let o = Overrides {
        seed,
        mode: Some(DecodeMode::Lantern),
        ..Overrides::default()
    };
    let run = || -> Result<(), HarnessError> {
        let cfg = config(path, &o)?;
        let work = load_workload(&cfg)?;
        let cb = work.codebook.as_ref().expect("lantern mode loads a codebook");
        let k = k.min(cb.vocab_size());
        let idx = build_neighbor_index(cb, k, cfg.proximity)?;
        let r = replace_demo(&work.target, &idx, &[TokenId(0)], len, cfg.seed);
        println!("position,original,replaced,tvd");
        for (i, ((a, b), d)) in r.original.iter().zip(&r.replaced).zip(&r.per_position_tvd).enumerate() {
            println!("{i},{a},{b},{d}");
        }
        println!("k = {k}");
        println!("mean_tvd = {}", r.mean_tvd);
        println!("changed_fraction = {}", r.changed_fraction);
        Ok(())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { config, overrides } => cmd_run(config.as_ref(), overrides),
        Command::Oracle { vanilla, lantern, seed } => cmd_oracle(*vanilla, *lantern, *seed),
        Command::KnnCheck {
            codebook,
            k,
            measure,
            measure_seed,
            count,
            max_vocab,
            max_dim,
            seed,
        } => cmd_knn(
            codebook.as_ref(),
            *k,
            *measure,
            *measure_seed,
            *count,
            *max_vocab,
            *max_dim,
            *seed,
        ),
        Command::ReplaceDemo { config, k, len, seed } => cmd_replace(config.as_ref(), *k, *len, *seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_measure_carries_its_seed() {
        assert_eq!(Measure::Random.kind(9), ProximityMeasureKind::Random { seed: 9 });
        assert_eq!(Measure::L2.kind(9), ProximityMeasureKind::L2);
    }

    #[test]
    fn mode_flag_maps_to_decode_mode() {
        let args = OverrideArgs { seed: Some(3), out_dir: None, mode: Some(Mode::Vanilla) };
        let o = args.to_overrides();
        assert_eq!(o.seed, Some(3));
        assert_eq!(o.mode, Some(DecodeMode::Vanilla));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
