use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use jrt_core::bench::{bench_prefill, cross_check, report_fig2, scaling_exponent, write_bench_csv, write_report, Impl};
use jrt_core::equivalence::{la_equivalence, pla_equivalence};
use jrt_core::prompt::{jrt_transform, PromptPair};
use jrt_core::set_disjointness::{gen_mixture, write_jsonl, Profile, Split};
use jrt_core::toy::{fig2_sweep, read_rows, write_rows, SweepSpec};

#[derive(Parser)]
#[command(name = "jrt", version, about = "Linear attention, prefix linear attention and set-disjointness experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Generate set-disjointness instances as JSON lines.
    Sdgen {
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Fraction of the per-tuple instance count, in (0, 1].
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy-model grid for one causality mode and write per-point rows.
    Train {
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        #[arg(long, action = clap::ArgAction::Set)]
        causal: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also write every individual run here.
        #[arg(long)]
        all_runs: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Check parallel, recurrent and two-pass views against each other.
    EquivCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
    },
    /// Time prefill implementations and write CSV.
    Bench {
        /// Implementations to time; all when omitted.
        #[arg(long = "impl", value_parser = parse_impl)]
        imps: Vec<Impl>,
        #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prompt transforms over whitespace-separated tokens from stdin.
    Prompt {
        #[command(subcommand)]
        kind: PromptKind,
    },
    /// Turn sweep CSVs into the three plot-data files.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "fig2")]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum PromptKind {
    /// Context and question separated by a line holding only `|`; prints `C Q C Q`.
    Jrt {
        #[arg(long)]
        budget: usize,
    },
}

fn parse_impl(s: &str) -> Result<Impl, String> {
    s.parse()
}

enum Outcome {
    Ok,
    CheckFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Sdgen { split, scale, vocab, seed, profile, out } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let data = gen_mixture(profile.into(), split, scale, vocab, seed)?;
            let w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
            write_jsonl(w, &data)?;
            eprintln!("wrote {} instances to {}", data.len(), out.display());
        }
        Command::Train { profile, causal, out, all_runs, epochs, threads } => {
            let mut spec = match profile {
                ProfileArg::Desk => SweepSpec::desk(),
                ProfileArg::Paper => SweepSpec::paper(),
            };
            if let Some(e) = epochs {
                spec.epochs = e;
            }
            eprintln!("{}", serde_json::to_string(&spec)?);
            let (runs, points) = fig2_sweep(&spec, &[causal], threads, &|r| {
                eprintln!(
                    "d={} f={} lr={} seed={} acc={:.3} |A|<|B| {:.3} |B|<|A| {:.3}{}",
                    r.d_model,
                    r.feature_dim,
                    r.lr,
                    r.seed,
                    r.acc_overall,
                    r.acc_a_smaller,
                    r.acc_b_smaller,
                    if r.failed { " (diverged)" } else { "" }
                )
            })?;
            write_rows(File::create(&out).with_context(|| format!("creating {}", out.display()))?, &points)?;
            if let Some(path) = all_runs {
                write_rows(File::create(&path)?, &runs)?;
            }
        }
        Command::EquivCheck { instances, seed, tolerance } => {
            let la = la_equivalence(instances, 64, 8, seed)?;
            let pla = pla_equivalence(instances, 64, 8, seed + 1)?;
            let bench = cross_check(256, 4, seed)?;
            println!("linear attention   parallel vs recurrent     max rel err {:.3e}", la.max_rel_err);
            println!("prefix attention   three views               max rel err {:.3e}", pla.max_rel_err);
            println!("prefix attention   M = 0 equals causal       {}", if pla.exact_at_m0 { "exact" } else { "DIFFERS" });
            println!("bench impls        cross-check               max rel err {bench:.3e}");
            let ok = la.max_rel_err <= tolerance && pla.max_rel_err <= tolerance && pla.exact_at_m0 && bench <= tolerance;
            println!("{}", if ok { "PASS" } else { "FAIL" });
            if !ok {
                return Ok(Outcome::CheckFailed);
            }
        }
        Command::Bench { imps, n, batch, d, trials, seed, out } => {
            let imps = if imps.is_empty() { Impl::ALL.to_vec() } else { imps };
            let err = cross_check(256, d, seed)?;
            if err > 1e-10 {
                bail!("implementations disagree before timing (max rel err {err:.3e})");
            }
            let mut all = Vec::new();
            for imp in imps {
                let recs = bench_prefill(imp, &n, batch, d, trials, seed)?;
                if let Some(e) = scaling_exponent(&recs) {
                    eprintln!("{imp}: scaling exponent {e:.2}");
                }
                all.extend(recs);
            }
            match out {
                Some(path) => write_bench_csv(File::create(&path)?, &all)?,
                None => write_bench_csv(std::io::stdout().lock(), &all)?,
            }
        }
        Command::Prompt { kind: PromptKind::Jrt { budget } } => {
            let mut text = String::new();
            std::io::stdin().read_to_string(&mut text)?;
            println!("{}", jrt_prompt_text(&text, budget)?);
        }
        Command::Report { runs, out_dir } => {
            let mut rows = Vec::new();
            for path in &runs {
                let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                rows.extend(read_rows(BufReader::new(f)).with_context(|| path.display().to_string())?);
            }
            let report = report_fig2(&rows);
            for p in write_report(&report, &out_dir)? {
                println!("{}", p.display());
            }
            let mut stdout = std::io::stdout().lock();
            for g in &report.gap {
                writeln!(stdout, "state_bytes={} causal={} gap={:+.3}", g.state_bytes, g.causal, g.value)?;
            }
        }
    }
    Ok(Outcome::Ok)
}

/// Splits on the `|` line, interns words as token ids, applies the
/// transform and maps back to words.
fn jrt_prompt_text(text: &str, budget: usize) -> Result<String> {
    let mut lines = text.lines();
    let mut context = Vec::new();
    let mut found = false;
    for line in lines.by_ref() {
        if line.trim() == "|" {
            found = true;
            break;
        }
        context.push(line);
    }
    if !found {
        bail!("expected a line containing only `|` between context and question");
    }
    let question: Vec<&str> = lines.collect();
    let mut ids: HashMap<&str, u32> = HashMap::new();
    let mut words: Vec<&str> = Vec::new();
    let mut tokens = [Vec::new(), Vec::new()];
    for (chunk, out) in [context, question].iter().zip(&mut tokens) {
        for w in chunk.iter().flat_map(|l| l.split_whitespace()) {
            let id = *ids.entry(w).or_insert(words.len() as u32);
            if id as usize == words.len() {
                words.push(w);
            }
            out.push(id);
        }
    }
    let [c, q] = tokens;
    let out = jrt_transform(&PromptPair::new(c, q, budget))?;
    Ok(out.iter().map(|&i| words[i as usize]).collect::<Vec<_>>().join(" "))
}
