//! Per-sample record of a closed-loop run.

use std::io::Write;

use nalgebra::DVector;

use crate::attack::ResidueReport;
use crate::error::Result;
use crate::observer::Estimate;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateTrace {
    pub observers: Vec<String>,
    /// Number of leading state entries that are rotor angles.
    pub angles: usize,
    pub truth: Vec<DVector<f64>>,
    /// `estimates[o][k]`.
    pub estimates: Vec<Vec<DVector<f64>>>,
    /// Samples at which observer `o` fell back to prediction, with the reason.
    pub failures: Vec<Vec<(usize, String)>>,
    pub iterations: Vec<Vec<usize>>,
    pub residue: Vec<f64>,
    pub alarm: Vec<bool>,
    pub threshold: f64,
    pub attack: Vec<DVector<f64>>,
    pub attack_scale: Vec<f64>,
    /// Worst power-flow residual of the recovered bus angles.
    pub max_flow_residual: f64,
}

impl EstimateTrace {
    pub fn new(observers: Vec<String>, angles: usize, capacity: usize) -> Self {
        let n = observers.len();
        Self {
            observers,
            angles,
            truth: Vec::with_capacity(capacity),
            estimates: vec![Vec::with_capacity(capacity); n],
            failures: vec![Vec::new(); n],
            iterations: vec![Vec::with_capacity(capacity); n],
            residue: Vec::with_capacity(capacity),
            alarm: Vec::with_capacity(capacity),
            threshold: 0.0,
            attack: Vec::with_capacity(capacity),
            attack_scale: Vec::with_capacity(capacity),
            max_flow_residual: 0.0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn push(
        &mut self,
        k: usize,
        x: &DVector<f64>,
        estimates: Vec<Estimate>,
        report: ResidueReport,
        e: &DVector<f64>,
        scale: f64,
        flow_residual: f64,
    ) {
        self.truth.push(x.clone());
        for (o, est) in estimates.into_iter().enumerate() {
            if let Some(msg) = est.failure {
                self.failures[o].push((k, msg));
            }
            self.iterations[o].push(est.iterations);
            self.estimates[o].push(est.x);
        }
        self.residue.push(report.residue);
        self.alarm.push(report.alarm);
        self.threshold = report.threshold;
        self.attack.push(e.clone());
        self.attack_scale.push(scale);
        self.max_flow_residual = self.max_flow_residual.max(flow_residual);
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn observer_index(&self, name: &str) -> Option<usize> {
        self.observers.iter().position(|n| n == name)
    }

    pub fn attack_active(&self, k: usize) -> bool {
        self.attack[k].iter().any(|v| *v != 0.0)
    }

    /// Rotor-angle error `delta_hat - delta` of observer `o` at sample `k`.
    pub fn angle_error(&self, o: usize, k: usize) -> DVector<f64> {
        let est = self.estimates[o][k].rows(0, self.angles);
        let tru = self.truth[k].rows(0, self.angles);
        est - tru
    }

    /// Alarms the stored residues would raise at another threshold.
    pub fn alarms_at(&self, threshold: f64, from: usize) -> usize {
        self.residue.iter().skip(from).filter(|r| **r > threshold).count()
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["sample".to_string()];
        h.extend((1..=self.angles).map(|i| format!("delta{i}")));
        for name in &self.observers {
            h.extend((1..=self.angles).map(|i| format!("{name}_delta{i}")));
        }
        h.extend(["residue", "alarm", "attack_active", "attacked_channels", "attack_scale"].map(String::from));
        h.extend(self.observers.iter().map(|n| format!("{n}_failed")));
        h.extend(self.observers.iter().map(|n| format!("{n}_iterations")));
        h
    }

    /// Plot-ready CSV: sample, true angles, each observer's angles, detector
    /// residue and alarm, attack flags, per-observer failure flags and solver
    /// iteration counts.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header())?;
        let mut failed: Vec<Vec<bool>> = vec![vec![false; self.len()]; self.observers.len()];
        for (o, f) in self.failures.iter().enumerate() {
            for (k, _) in f {
                failed[o][*k] = true;
            }
        }
        for k in 0..self.len() {
            let mut row = vec![k.to_string()];
            row.extend(self.truth[k].rows(0, self.angles).iter().map(|v| v.to_string()));
            for o in 0..self.observers.len() {
                row.extend(self.estimates[o][k].rows(0, self.angles).iter().map(|v| v.to_string()));
            }
            row.push(self.residue[k].to_string());
            row.push(u8::from(self.alarm[k]).to_string());
            row.push(u8::from(self.attack_active(k)).to_string());
            row.push(self.attack[k].iter().filter(|v| **v != 0.0).count().to_string());
            row.push(self.attack_scale[k].to_string());
            for f in &failed {
                row.push(u8::from(f[k]).to_string());
            }
            for it in &self.iterations {
                row.push(it[k].to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
