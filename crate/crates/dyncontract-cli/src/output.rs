//! Deterministic file emission: fixed float format, sorted JSON keys, run manifest.

use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Scientific notation with 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Pretty JSON whose floats always use [`num`].
struct SciFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for SciFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(num(value).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json(v: &Value) -> String {
    let mut buf = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut buf, SciFormatter(PrettyFormatter::new()));
    serde::Serialize::serialize(v, &mut ser).expect("in-memory JSON serialization");
    buf.push(b'\n');
    String::from_utf8(buf).expect("JSON output is UTF-8")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes files into the output directory and records them for the manifest.
pub struct Emitter {
    dir: PathBuf,
    files: Vec<(String, String)>,
    started: Instant,
}

impl Emitter {
    pub fn new(dir: &Path) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Emitter {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> io::Result<()> {
        std::fs::write(self.dir.join(name), contents)?;
        self.files
            .push((name.to_string(), sha256_hex(contents.as_bytes())));
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, v: &Value) -> io::Result<()> {
        self.write(name, &to_json(v))
    }

    /// `manifest.json`; every field except `wall_time_s` is reproducible.
    pub fn finish(self, command: &str, config_text: &str) -> io::Result<()> {
        let files: Vec<Value> = self
            .files
            .iter()
            .map(|(n, h)| json!({ "path": n, "sha256": h }))
            .collect();
        let manifest = json!({
            "command": command,
            "config_sha256": sha256_hex(config_text.as_bytes()),
            "library_version": dyncontract::VERSION,
            "files": files,
            "wall_time_s": self.started.elapsed().as_secs_f64(),
        });
        std::fs::write(self.dir.join("manifest.json"), to_json(&manifest))
    }
}

pub fn dynamics_plot(horizon: usize) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set xlabel 't'\n\
         set xrange [0.5:{}.5]\n\
         set multiplot layout 2,1\n\
         set ylabel 'flow utility'\n\
         plot 'dynamics.csv' using 1:3 with points pt 7 title 'nu (h report)', \\\n     \
         '' using 1:5 with points pt 6 title 'nu (l report)'\n\
         set ylabel 'distortion'\n\
         plot 'dynamics.csv' using 1:4 with points pt 7 title 'Delta'\n\
         unset multiplot\n",
        horizon
    )
}

pub fn sweep_plot(parameter: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set xlabel '{parameter}'\n\
         set multiplot layout 2,1\n\
         set ylabel 'profit'\n\
         plot 'sweep.csv' using 1:4 with linespoints title 'total', \\\n     \
         '' using 1:5 with linespoints title 'from l', \\\n     \
         '' using 1:6 with linespoints title 'from h'\n\
         set ylabel 'first-period distortion'\n\
         plot 'sweep.csv' using 1:9 with linespoints title 'Delta_1'\n\
         unset multiplot\n"
    )
}
