//! CSV sinks for one run. Columns are fixed; optional values are written as
//! empty fields.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const TRAJECTORY_HEADER: &str = "episode,t,x,y,z,vx,vy,vz,roll,pitch,p,q,thrust,theta_norm,d_true_norm,wind_x,wind_y,wind_z";
pub const CONFORMAL_HEADER: &str = "episode,k,k_local,t,thread,score,q_active,d_bar,case,miss_at_update,covered_score,covered_pointwise";
pub const PLAN_HEADER: &str = "episode,k,t,mode,feasible,cost,violation,tracking_error,predicted_tube,tube";
pub const RESIDUAL_HEADER: &str = "episode,k,i,t,r";

struct Sink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Sink {
    fn create(dir: &Path, name: &str, header: &str) -> Result<Self> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut sink = Sink {
            path,
            out: BufWriter::new(file),
        };
        sink.line(header)?;
        Ok(sink)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "{text}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Open log files of a run. The `tube` column of `plan.csv` and the `r`
/// column of `residuals.csv` hold `;`-separated vectors.
pub struct RunLogs {
    dir: PathBuf,
    trajectory: Sink,
    conformal: Sink,
    plan: Sink,
    residuals: Option<Sink>,
}

impl RunLogs {
    pub fn create(dir: &Path, residuals: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(RunLogs {
            dir: dir.to_path_buf(),
            trajectory: Sink::create(dir, "trajectory.csv", TRAJECTORY_HEADER)?,
            conformal: Sink::create(dir, "conformal.csv", CONFORMAL_HEADER)?,
            plan: Sink::create(dir, "plan.csv", PLAN_HEADER)?,
            residuals: if residuals {
                Some(Sink::create(dir, "residuals.csv", RESIDUAL_HEADER)?)
            } else {
                None
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn trajectory(&mut self, fields: &[String]) -> Result<()> {
        self.trajectory.line(&fields.join(","))
    }

    pub fn conformal(&mut self, fields: &[String]) -> Result<()> {
        self.conformal.line(&fields.join(","))
    }

    pub fn plan(&mut self, fields: &[String]) -> Result<()> {
        self.plan.line(&fields.join(","))
    }

    pub fn residual(&mut self, fields: &[String]) -> Result<()> {
        match self.residuals.as_mut() {
            Some(s) => s.line(&fields.join(",")),
            None => Ok(()),
        }
    }

    pub fn wants_residuals(&self) -> bool {
        self.residuals.is_some()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.trajectory.flush()?;
        self.conformal.flush()?;
        self.plan.flush()?;
        if let Some(s) = self.residuals.as_mut() {
            s.flush()?;
        }
        Ok(())
    }

    pub fn write_json(&self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn opt_bool(v: Option<bool>) -> String {
    v.map(|b| u8::from(b).to_string()).unwrap_or_default()
}

pub fn joined(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}
