//! Per-interval training diagnostics and their CSV form.

use std::io::Write;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,q_loss,v_loss,vae_recon,vae_kl,policy_loss,lambda,\
mean_adv_data,mean_adv_selected,frac_vae_chosen,frac_self_learn,constraint_gap,\
eval_return_mean,eval_return_std,normalized_score,est_q,true_q,value_gap";

/// Interval averages; `None` fields are written as empty cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub q_loss: Option<f64>,
    pub v_loss: Option<f64>,
    pub vae_recon: Option<f64>,
    pub vae_kl: Option<f64>,
    pub policy_loss: Option<f64>,
    pub lambda: Option<f64>,
    pub mean_adv_data: Option<f64>,
    pub mean_adv_selected: Option<f64>,
    pub frac_vae_chosen: Option<f64>,
    pub frac_self_learn: Option<f64>,
    pub constraint_gap: Option<f64>,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub normalized_score: Option<f64>,
    pub est_q: Option<f64>,
    pub true_q: Option<f64>,
    /// Mean `|Q(s, π(s)) - Q(s, ā)|` over policy steps.
    pub value_gap: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    fn cells(&self) -> [Option<f64>; 17] {
        [
            self.q_loss,
            self.v_loss,
            self.vae_recon,
            self.vae_kl,
            self.policy_loss,
            self.lambda,
            self.mean_adv_data,
            self.mean_adv_selected,
            self.frac_vae_chosen,
            self.frac_self_learn,
            self.constraint_gap,
            self.eval_return_mean,
            self.eval_return_std,
            self.normalized_score,
            self.est_q,
            self.true_q,
            self.value_gap,
        ]
    }

    pub fn to_csv_line(&self) -> String {
        let mut s = self.step.to_string();
        for c in self.cells() {
            s.push(',');
            s.push_str(&cell(c));
        }
        s
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed metrics line '{line}'"));
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 18 {
            return Err(bad());
        }
        let mut v = [None; 17];
        for (slot, p) in v.iter_mut().zip(&parts[1..]) {
            if !p.is_empty() {
                *slot = Some(p.parse::<f64>().map_err(|_| bad())?);
            }
        }
        Ok(Self {
            step: parts[0].parse().map_err(|_| bad())?,
            q_loss: v[0],
            v_loss: v[1],
            vae_recon: v[2],
            vae_kl: v[3],
            policy_loss: v[4],
            lambda: v[5],
            mean_adv_data: v[6],
            mean_adv_selected: v[7],
            frac_vae_chosen: v[8],
            frac_self_learn: v[9],
            constraint_gap: v[10],
            eval_return_mean: v[11],
            eval_return_std: v[12],
            normalized_score: v[13],
            est_q: v[14],
            true_q: v[15],
            value_gap: v[16],
        })
    }
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv_line())?;
    }
    Ok(())
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        _ => return Err(Error::Config("metrics file has an unexpected header".into())),
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::from_csv_line).collect()
}

/// Running sums between two logged rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntervalAccumulator {
    pub steps: u64,
    pub q_loss: f64,
    pub v_loss: f64,
    pub vae_steps: u64,
    pub vae_recon: f64,
    pub vae_kl: f64,
    pub policy_steps: u64,
    pub policy_loss: f64,
    pub lambda: f64,
    pub mean_adv_data: f64,
    pub mean_adv_selected: f64,
    pub frac_vae_chosen: f64,
    pub frac_self_learn: f64,
    pub constraint_gap: f64,
    pub value_gap: f64,
}

impl IntervalAccumulator {
    pub fn add(&mut self, m: &super::StepMetrics) {
        self.steps += 1;
        self.q_loss += m.q_loss;
        self.v_loss += m.v_loss;
        if let Some((recon, kl)) = m.vae {
            self.vae_steps += 1;
            self.vae_recon += recon;
            self.vae_kl += kl;
        }
        if let Some(p) = &m.policy {
            self.policy_steps += 1;
            self.policy_loss += p.loss;
            self.lambda += p.lambda;
            self.mean_adv_data += p.mean_adv_data;
            self.mean_adv_selected += p.mean_adv_selected;
            self.frac_vae_chosen += p.frac_vae_chosen;
            self.frac_self_learn += p.frac_self_learn;
            self.constraint_gap += p.constraint_gap;
            self.value_gap += p.value_gap;
        }
    }

    /// Fill the training columns of `row` and reset.
    pub fn drain_into(&mut self, row: &mut MetricsRow) {
        let avg = |sum: f64, n: u64| (n > 0).then(|| sum / n as f64);
        row.q_loss = avg(self.q_loss, self.steps);
        row.v_loss = avg(self.v_loss, self.steps);
        row.vae_recon = avg(self.vae_recon, self.vae_steps);
        row.vae_kl = avg(self.vae_kl, self.vae_steps);
        let p = self.policy_steps;
        row.policy_loss = avg(self.policy_loss, p);
        row.lambda = avg(self.lambda, p);
        row.mean_adv_data = avg(self.mean_adv_data, p);
        row.mean_adv_selected = avg(self.mean_adv_selected, p);
        row.frac_vae_chosen = avg(self.frac_vae_chosen, p);
        row.frac_self_learn = avg(self.frac_self_learn, p);
        row.constraint_gap = avg(self.constraint_gap, p);
        row.value_gap = avg(self.value_gap, p);
        *self = Self::default();
    }

    /// Exact text form (f64 bit patterns) for checkpoint manifests.
    pub fn to_bits_string(&self) -> String {
        let f = [
            self.q_loss,
            self.v_loss,
            self.vae_recon,
            self.vae_kl,
            self.policy_loss,
            self.lambda,
            self.mean_adv_data,
            self.mean_adv_selected,
            self.frac_vae_chosen,
            self.frac_self_learn,
            self.constraint_gap,
            self.value_gap,
        ];
        let mut parts = vec![
            self.steps.to_string(),
            self.vae_steps.to_string(),
            self.policy_steps.to_string(),
        ];
        parts.extend(f.iter().map(|x| format!("{:016x}", x.to_bits())));
        parts.join(" ")
    }

    pub fn from_bits_string(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("malformed accumulator '{s}'"));
        let p: Vec<&str> = s.split_whitespace().collect();
        if p.len() != 15 {
            return Err(bad());
        }
        let n = |i: usize| p[i].parse::<u64>().map_err(|_| bad());
        let f = |i: usize| {
            u64::from_str_radix(p[i], 16)
                .map(f64::from_bits)
                .map_err(|_| bad())
        };
        Ok(Self {
            steps: n(0)?,
            vae_steps: n(1)?,
            policy_steps: n(2)?,
            q_loss: f(3)?,
            v_loss: f(4)?,
            vae_recon: f(5)?,
            vae_kl: f(6)?,
            policy_loss: f(7)?,
            lambda: f(8)?,
            mean_adv_data: f(9)?,
            mean_adv_selected: f(10)?,
            frac_vae_chosen: f(11)?,
            frac_self_learn: f(12)?,
            constraint_gap: f(13)?,
            value_gap: f(14)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_column_order() {
        let cols: Vec<&str> = METRICS_HEADER.split(',').collect();
        assert_eq!(cols.len(), 18);
        assert_eq!(cols[0], "step");
        assert_eq!(cols[11], "constraint_gap");
        assert_eq!(cols[16], "true_q");
    }

    #[test]
    fn csv_round_trip_with_blanks() {
        let row = MetricsRow {
            step: 10,
            q_loss: Some(0.1 + 0.2),
            eval_return_mean: Some(-3.5e-7),
            ..Default::default()
        };
        let line = row.to_csv_line();
        assert!(line.starts_with("10,0.30000000000000004,,"));
        assert_eq!(MetricsRow::from_csv_line(&line).unwrap(), row);
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[row.clone()]).unwrap();
        assert_eq!(read_metrics_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), vec![row]);
    }

    #[test]
    fn accumulator_bits_round_trip() {
        let acc = IntervalAccumulator {
            steps: 3,
            policy_steps: 1,
            q_loss: 1.0 / 3.0,
            value_gap: f64::MIN_POSITIVE,
            ..Default::default()
        };
        let back = IntervalAccumulator::from_bits_string(&acc.to_bits_string()).unwrap();
        assert_eq!(back, acc);
    }
}
