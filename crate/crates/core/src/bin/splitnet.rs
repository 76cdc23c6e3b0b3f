use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use splitnet::bench::{self, BenchConfig, BenchMode, BenchResult, Scenario};
use splitnet::topology::{RackTopology, Transport};
use splitnet::Error;

#[derive(Parser)]
#[command(
    name = "splitnet",
    version,
    about = "Benchmarks for the emulated split-kernel network stack"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Echo round trips between an external client and a server.
    Echo(Common),
    /// Ping-pong between two stubs inside the rack over every route.
    Local(Common),
    /// Connection establishment towards an external listener.
    Conn(Common),
    /// Streaming word count with an external reducer.
    Wordcount {
        #[command(flatten)]
        common: Common,
        /// Corpus file; a seeded random corpus is generated when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Size of the generated corpus.
        #[arg(long, default_value_t = 10 << 20)]
        corpus_bytes: usize,
        /// Corpus bytes mapped per record batch.
        #[arg(long, default_value_t = 1 << 20)]
        batch_bytes: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inprocess,
    Hostsocket,
}

#[derive(Args)]
struct Common {
    /// Comma-separated modes: dma, ddio, baseline.
    #[arg(long, value_delimiter = ',', default_value = "dma,ddio,baseline")]
    mode: Vec<BenchMode>,
    /// Comma-separated message sizes in bytes.
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024,2048")]
    sizes: Vec<usize>,
    /// Measured iterations per size.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Unmeasured iterations before counters are reset.
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// Rack topology file (TOML); the default rack when absent.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Write results as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Overrides the topology's transport.
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
}

fn configs(cli: Cli) -> Result<(Vec<BenchConfig>, Option<PathBuf>), Error> {
    let (scenario, common, corpus) = match cli.cmd {
        Cmd::Echo(c) => (Scenario::Echo, c, None),
        Cmd::Local(c) => (Scenario::Local, c, None),
        Cmd::Conn(c) => (Scenario::ConnSetup, c, None),
        Cmd::Wordcount {
            common,
            corpus,
            corpus_bytes,
            batch_bytes,
        } => (
            Scenario::WordCount,
            common,
            Some((corpus, corpus_bytes, batch_bytes)),
        ),
    };
    let mut topology = match &common.topology {
        Some(p) => RackTopology::from_path(p)?,
        None => RackTopology::from_env()?,
    };
    match common.transport {
        Some(TransportArg::Inprocess) => topology.transport = Transport::InProcess,
        Some(TransportArg::Hostsocket) => topology.transport = Transport::HostSocket,
        None => {}
    }
    // the local scenario measures every route itself
    let modes = if scenario == Scenario::Local {
        vec![BenchMode::Dma]
    } else {
        common.mode.clone()
    };
    let cfgs = modes
        .into_iter()
        .map(|mode| {
            let mut c = BenchConfig::new(scenario, mode);
            c.sizes = common.sizes.clone();
            c.iterations = common.iters;
            c.warmup = common.warmup;
            c.topology = topology.clone();
            c.seed = common.seed;
            if let Some((path, bytes, batch)) = &corpus {
                c.corpus_path = path.clone();
                c.corpus_bytes = *bytes;
                c.batch_bytes = *batch;
            }
            c
        })
        .collect();
    Ok((cfgs, common.csv))
}

fn main() -> ExitCode {
    let run = || -> Result<(), Error> {
        let (cfgs, csv) = configs(Cli::parse())?;
        let mut result = BenchResult::default();
        for c in &cfgs {
            result.extend(bench::run(c)?);
        }
        print!("{}", result.summary());
        if let Some(p) = csv {
            bench::emit_csv(&result, &p)?;
        }
        Ok(())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::ScenarioFailed(_)) => {
            eprintln!("splitnet: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("splitnet: {e}");
            ExitCode::FAILURE
        }
    }
}
