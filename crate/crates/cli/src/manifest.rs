use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Serialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

/// Written next to every artifact: what ran, on which inputs, and how long it took.
#[derive(Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub flags: serde_json::Value,
    pub seed: u64,
    pub jobs: usize,
    pub version: &'static str,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub timings: Vec<Timing>,
    #[serde(skip)]
    clock: Option<(String, Instant)>,
}

impl RunManifest {
    pub fn new(subcommand: &str, argv: Vec<String>, flags: serde_json::Value, seed: u64, jobs: usize) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            argv,
            flags,
            seed,
            jobs,
            version: env!("CARGO_PKG_VERSION"),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
            clock: None,
        }
    }

    pub fn input(&mut self, path: &Path) -> io::Result<()> {
        let mut hasher = Sha256::new();
        let mut r = BufReader::new(File::open(path)?);
        let mut bytes = 0u64;
        loop {
            let chunk = r.fill_buf()?;
            if chunk.is_empty() {
                break;
            }
            hasher.update(chunk);
            let n = chunk.len();
            bytes += n as u64;
            r.consume(n);
        }
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: hex::encode(hasher.finalize()),
            bytes,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Close the running stage, if any, and start timing `stage`.
    pub fn stage(&mut self, stage: &str) {
        self.stop();
        self.clock = Some((stage.to_string(), Instant::now()));
    }

    pub fn stop(&mut self) {
        if let Some((stage, t)) = self.clock.take() {
            log::info!("{stage}: {:.2?}", t.elapsed());
            self.timings.push(Timing {
                stage,
                seconds: t.elapsed().as_secs_f64(),
            });
        }
    }

    pub fn write(mut self, path: &Path) -> io::Result<()> {
        self.stop();
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &self)?;
        f.write_all(b"\n")
    }
}

/// `out.jsonl` gets `out.jsonl.manifest.json`.
pub fn beside(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
