//! Command-line surface: parse the form DSL, run exact computations, and
//! emit versioned JSON reports and certificates.

use clap::{Parser, Subcommand};
use cubiform::embed::{embed_into_v_infinity, embed_into_v_r, sum_of_cubes, verify_embedding};
use cubiform::harness::{run_all_suites, run_suite, SuiteReport};
use cubiform::quad::QuadraticForm;
use cubiform::report;
use cubiform::rrk::{kth_residual_rank, residual_rank};
use cubiform::tables::{assemble_embedding, GoodTable, TableError};
use cubiform::{parse_form, Field, StructuredForm};
use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cubiform",
    version,
    about = "Exact residual-rank toolkit for cubic forms in countably many variables"
)]
struct Cli {
    /// Base field characteristic (an odd prime p ≠ 3 with p ≡ 2 mod 3).
    #[arg(long, global = true, default_value_t = 101)]
    field: u64,
    /// Truncation window for window-based verification.
    #[arg(long, global = true, default_value_t = 10)]
    window: u32,
    /// Sample budget per randomized witness search.
    #[arg(long, global = true, default_value_t = 10_000)]
    budget: u32,
    /// Seed for every randomized procedure; runs are deterministic given it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Print the full JSON report on stdout instead of a summary.
    #[arg(long, global = true)]
    json: bool,
    /// Write the JSON report to this file.
    #[arg(long, global = true, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Residual rank of a form, with a class basis and window evidence.
    Rrk {
        /// DSL input file; stdin when omitted or "-".
        input: Option<PathBuf>,
    },
    /// K-th residual rank of a degree-(k+2) form.
    #[command(name = "rrk-k")]
    RrkK {
        k: u32,
        input: Option<PathBuf>,
    },
    /// Produce an embedding certificate into V(r) (--r) or V(inf).
    Embed {
        input: Option<PathBuf>,
        /// Target rank r; omitted means the infinite model.
        #[arg(long)]
        r: Option<u32>,
    },
    /// Re-derive an embedding and verify it on the window; exit 1 on failure.
    Verify {
        input: Option<PathBuf>,
        /// Target rank r; omitted means the infinite model.
        #[arg(long)]
        r: Option<u32>,
    },
    /// Exact decompositions of finite data.
    #[command(subcommand)]
    Decompose(DecomposeCmd),
    /// Grow good tables and assemble their embedding certificates.
    #[command(subcommand)]
    Table(TableCmd),
    /// The isogeny-class label of a form: its residual rank.
    Classify {
        input: Option<PathBuf>,
    },
    /// Run the property suites with pinned seeds.
    Selftest {
        /// Run one named suite instead of all of them.
        #[arg(long)]
        suite: Option<String>,
        /// Trials for a single named suite.
        #[arg(long, default_value_t = 50)]
        trials: u32,
    },
}

#[derive(Subcommand)]
enum DecomposeCmd {
    /// Write a quadratic form as an exact sum of squares.
    Sos {
        input: Option<PathBuf>,
    },
    /// Write a finite cubic as an exact sum of cubes of linear forms.
    Cubes {
        input: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TableCmd {
    /// Grow a good table over the ambient form and dump it.
    Grow {
        /// Ambient form DSL; stdin when omitted.
        input: Option<PathBuf>,
        /// Extra growth steps beyond the minimal viable table.
        #[arg(long, default_value_t = 2)]
        steps: u32,
    },
    /// Grow a chain of good tables and assemble the embedding certificate.
    Assemble {
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        steps: u32,
    },
}

enum CliError {
    /// Malformed input or flags: exit 2.
    Usage(String),
    /// A computation or verification failed: exit 1.
    Failed(String),
    /// A witness search ran out of samples: exit 3.
    Budget(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
            CliError::Budget(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Failed(m) | CliError::Budget(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn failed<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Failed(e.to_string())
}

fn table_err(e: TableError) -> CliError {
    match e {
        TableError::BudgetExhausted { .. } => CliError::Budget(e.to_string()),
        _ => CliError::Failed(e.to_string()),
    }
}

fn read_input(path: &Option<PathBuf>) -> Result<String, CliError> {
    match path {
        Some(p) if p.as_os_str() != "-" => std::fs::read_to_string(p)
            .map_err(|e| usage(format!("cannot read {}: {e}", p.display()))),
        _ => {
            let mut buf = String::new();
            std::io::stdin()
                .read_to_string(&mut buf)
                .map_err(|e| usage(format!("cannot read stdin: {e}")))?;
            Ok(buf)
        }
    }
}

fn parse_input(field: &Field, path: &Option<PathBuf>) -> Result<StructuredForm, CliError> {
    let text = read_input(path)?;
    parse_form(field, &text).map_err(usage)
}

/// Print/write the report per --json/--out; the human summary is the default.
fn emit(cli: &Cli, value: &serde_json::Value, human: &str) -> Result<(), CliError> {
    let rendered = serde_json::to_string_pretty(value).expect("report serializes");
    if let Some(out) = &cli.out {
        std::fs::write(out, format!("{rendered}\n"))
            .map_err(|e| usage(format!("cannot write {}: {e}", out.display())))?;
    }
    if cli.json {
        println!("{rendered}");
    } else {
        println!("{human}");
    }
    Ok(())
}

fn windows_for(window: u32) -> Vec<u32> {
    let mut ws = vec![5, window.max(6)];
    ws.dedup();
    ws
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let field = Field::new(cli.field).map_err(usage)?;
    match &cli.command {
        Command::Rrk { input } => {
            let form = parse_input(&field, input)?;
            let rep = residual_rank(&form).map_err(failed)?;
            let human = format!(
                "rrk = {} ({})\nbasis: {}\nwindows: {}",
                rep.value,
                mode_name(rep.mode),
                if rep.basis.is_empty() {
                    "(empty)".to_string()
                } else {
                    rep.basis.join(", ")
                },
                if rep.windows.is_empty() {
                    "(symbolic, no window schedule needed)".to_string()
                } else {
                    rep.windows
                        .iter()
                        .map(|w| format!("{}→{}", w.window, w.rank))
                        .collect::<Vec<_>>()
                        .join(" ")
                },
            );
            emit(cli, &report::rrk_report(&rep), &human)
        }
        Command::RrkK { k, input } => {
            let form = parse_input(&field, input)?;
            let rep = kth_residual_rank(&form, *k).map_err(failed)?;
            let human = format!("rrk_{k} = {} ({})", rep.value, mode_name(rep.mode));
            emit(cli, &report::rrk_report(&rep), &human)
        }
        Command::Embed { input, r } => {
            let form = parse_input(&field, input)?;
            let cert = build_certificate(&form, *r, cli)?;
            let human = certificate_summary(&cert);
            emit(cli, &report::certificate_report(&cert), &human)?;
            if cert.all_verified() {
                Ok(())
            } else {
                Err(failed("certificate verification failed"))
            }
        }
        Command::Verify { input, r } => {
            let form = parse_input(&field, input)?;
            let cert = build_certificate(&form, *r, cli)?;
            let (ok, why) = verify_embedding(&cert, cli.window);
            let value = serde_json::json!({
                "schema": report::SCHEMA,
                "kind": "verify",
                "window": cli.window,
                "ok": ok,
                "detail": why,
            });
            let human = if ok {
                format!("verified at window {}: ok", cli.window)
            } else {
                format!(
                    "verification FAILED at window {}: {}",
                    cli.window,
                    why.as_deref().unwrap_or("mismatch")
                )
            };
            emit(cli, &value, &human)?;
            if ok {
                Ok(())
            } else {
                Err(failed("window verification failed"))
            }
        }
        Command::Decompose(DecomposeCmd::Cubes { input }) => {
            let text = read_input(input)?;
            let p = cubiform::parse_poly(&field, &text).map_err(usage)?;
            if p.degree() != 3 {
                return Err(usage(format!(
                    "sum-of-cubes needs a cubic, got degree {}",
                    p.degree()
                )));
            }
            let cubes = sum_of_cubes(&p).map_err(failed)?;
            let human = format!(
                "{} cubes:\n{}",
                cubes.len(),
                cubes
                    .iter()
                    .map(|l| format!("  ({l})^3"))
                    .collect::<Vec<_>>()
                    .join("\n")
            );
            emit(cli, &report::cubes_report(&p, &cubes), &human)
        }
        Command::Decompose(DecomposeCmd::Sos { input }) => {
            let text = read_input(input)?;
            let form = parse_form(&field, &text).map_err(usage)?;
            if form.degree() != 2 {
                return Err(usage(format!(
                    "sum-of-squares needs a quadratic, got degree {}",
                    form.degree()
                )));
            }
            let q = QuadraticForm::from_structured(&form).map_err(usage)?;
            let d = q.sos_decompose();
            let human = format!(
                "{} finite squares + {} square streams",
                d.finite_square_count(),
                d.streams.len()
            );
            emit(cli, &report::sos_report(text.trim(), &d), &human)
        }
        Command::Table(TableCmd::Grow { input, steps }) => {
            let ambient = parse_input(&field, input)?;
            let chain = grow_chain(&ambient, *steps, cli)?;
            let t = chain.last().expect("chain is never empty");
            let good = t.check_good();
            let human = format!(
                "{} table over {}: {} rows, {} entries, good = {}",
                t.mode(),
                t.ambient(),
                t.rows().len(),
                t.entry_count(),
                good.ok
            );
            emit(cli, &report::table_report(t), &human)?;
            if good.ok {
                Ok(())
            } else {
                Err(failed(good.violation.unwrap_or_default()))
            }
        }
        Command::Table(TableCmd::Assemble { input, steps }) => {
            let ambient = parse_input(&field, input)?;
            let chain = grow_chain(&ambient, *steps, cli)?;
            let cert = assemble_embedding(&chain).map_err(table_err)?;
            let human = certificate_summary(&cert);
            emit(cli, &report::certificate_report(&cert), &human)?;
            if cert.all_verified() {
                Ok(())
            } else {
                Err(failed("assembled certificate failed verification"))
            }
        }
        Command::Classify { input } => {
            let form = parse_input(&field, input)?;
            let rep = residual_rank(&form).map_err(failed)?;
            let human = format!("class {} ({})", rep.value, mode_name(rep.mode));
            emit(cli, &report::classify_report(&rep.value, rep.mode), &human)
        }
        Command::Selftest { suite, trials } => {
            let reports: Vec<SuiteReport> = match suite {
                Some(name) => {
                    vec![run_suite(&field, name, *trials, cli.seed).map_err(usage)?]
                }
                None => run_all_suites(&field, cli.seed),
            };
            let entries: Vec<serde_json::Value> = reports
                .iter()
                .map(|r| report::suite_entry(&r.name, r.trials, &r.failing_seeds, r.millis))
                .collect();
            let value = report::selftest_report(field.depth(), entries);
            let mut human = String::new();
            for r in &reports {
                human.push_str(&format!(
                    "suite {:16} {} ({}/{} trials, {} ms)\n",
                    r.name,
                    if r.ok() { "PASS" } else { "FAIL" },
                    r.passed(),
                    r.trials,
                    r.millis
                ));
                for c in &r.counterexamples {
                    human.push_str(&format!("    counterexample: {c}\n"));
                }
            }
            human.push_str(&format!("max tower depth reached: {}", field.depth()));
            emit(cli, &value, &human)?;
            if reports.iter().all(|r| r.ok()) {
                Ok(())
            } else {
                Err(failed("one or more suites failed"))
            }
        }
    }
}

fn mode_name(mode: cubiform::Exactness) -> &'static str {
    match mode {
        cubiform::Exactness::Exact => "exact",
        cubiform::Exactness::Heuristic => "heuristic",
    }
}

fn build_certificate(
    form: &StructuredForm,
    r: Option<u32>,
    cli: &Cli,
) -> Result<cubiform::EmbeddingCertificate, CliError> {
    let windows = windows_for(cli.window);
    match r {
        Some(r) => embed_into_v_r(form, r, &windows).map_err(failed),
        None => embed_into_v_infinity(form, &windows).map_err(failed),
    }
}

fn certificate_summary(cert: &cubiform::EmbeddingCertificate) -> String {
    let windows = cert
        .verified_windows
        .iter()
        .map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "FAIL" }))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "source: {}\ntarget: {}\nsubstitution:\n{}\nwindows: {}",
        cert.source,
        cert.target,
        cert.substitution
            .pairs_for_report()
            .iter()
            .map(|(t, img)| format!("  {t} -> {img}"))
            .collect::<Vec<_>>()
            .join("\n"),
        windows
    )
}

/// Deterministic growth schedule: the minimal viable chain for the table's
/// mode, then `steps` extra growth operations, snapshotting after each op.
fn grow_chain(
    ambient: &StructuredForm,
    steps: u32,
    cli: &Cli,
) -> Result<Vec<GoodTable>, CliError> {
    let mut chain = Vec::new();
    let mut step_seed = cli.seed;
    let mut next_seed = || {
        step_seed = step_seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        step_seed
    };
    let rep = residual_rank(ambient).map_err(failed)?;
    let infinite = rep.value.is_infinite();
    let mut t = if infinite {
        GoodTable::new_inf(ambient).map_err(table_err)?
    } else {
        GoodTable::new_fin(ambient).map_err(table_err)?
    };
    if infinite {
        t = t.add_row(cli.budget, next_seed()).map_err(table_err)?;
        chain.push(t.clone());
        t = t.grow_row(1, cli.budget, next_seed()).map_err(table_err)?;
        chain.push(t.clone());
        for i in 0..steps {
            t = if i % 2 == 0 {
                t.add_row(cli.budget, next_seed()).map_err(table_err)?
            } else {
                let rows = t.rows().len();
                t.grow_row(rows, cli.budget, next_seed()).map_err(table_err)?
            };
            chain.push(t.clone());
        }
        // Assembly needs every row inhabited.
        for row in 1..=t.rows().len() {
            if t.rows()[row - 1].1.is_empty() {
                t = t.grow_row(row, cli.budget, next_seed()).map_err(table_err)?;
                chain.push(t.clone());
            }
        }
    } else {
        for row in 1..=t.rows().len() {
            t = t.grow_row(row, cli.budget, next_seed()).map_err(table_err)?;
            chain.push(t.clone());
        }
        for _ in 0..2 {
            t = t.grow_final_row(cli.budget, next_seed()).map_err(table_err)?;
            chain.push(t.clone());
        }
        for i in 0..steps {
            let rows = t.rows().len();
            t = if i as usize % (rows + 1) < rows {
                t.grow_row((i as usize % rows) + 1, cli.budget, next_seed())
                    .map_err(table_err)?
            } else {
                t.grow_final_row(cli.budget, next_seed()).map_err(table_err)?
            };
            chain.push(t.clone());
        }
    }
    Ok(chain)
}
