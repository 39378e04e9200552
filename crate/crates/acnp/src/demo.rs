//! Two predictions with the same probability on the true symbol get the
//! same cross-entropy, however different their implied child counts are.

use std::fmt;

use acnp_core::nn::cross_entropy_probs;

/// The true symbol: `00000010`, one occupied child.
pub const LABEL: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    pub name: &'static str,
    pub masses: Vec<(u8, f64)>,
    /// Cross-entropy against [`LABEL`], in bits.
    pub loss: f64,
    pub expected_count: f64,
    /// `|expected_count - 1|`.
    pub count_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeParadoxReport {
    pub label: u8,
    /// A (mass on single-child configurations) and B (mass on 7- and 8-child ones).
    pub a: DistributionReport,
    pub b: DistributionReport,
    /// A with the third mass on symbol 3 (two children) instead of 4.
    pub a_with_symbol_3: DistributionReport,
}

fn report(name: &'static str, masses: &[(u8, f64)]) -> DistributionReport {
    let mut p = [0.0; 255];
    for &(s, m) in masses {
        p[s as usize - 1] = m;
    }
    let loss = cross_entropy_probs(&[p], &[LABEL]).expect("label is a valid symbol");
    let expected_count: f64 = masses.iter().map(|&(s, m)| m * s.count_ones() as f64).sum();
    let truth = LABEL.count_ones() as f64;
    DistributionReport { name, masses: masses.to_vec(), loss, expected_count, count_error: (expected_count - truth).abs() }
}

pub fn demo_ce_paradox() -> CeParadoxReport {
    CeParadoxReport {
        label: LABEL,
        a: report("A", &[(1, 0.3), (2, 0.4), (4, 0.3)]),
        b: report("B", &[(2, 0.4), (253, 0.3), (255, 0.3)]),
        a_with_symbol_3: report("A'", &[(1, 0.3), (2, 0.4), (3, 0.3)]),
    }
}

impl fmt::Display for CeParadoxReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "label: symbol {} ({:08b}), {} occupied child", self.label, self.label, self.label.count_ones())?;
        writeln!(f, "{:<4} {:<40} {:>14} {:>14} {:>12}", "dist", "mass (symbol:p, children)", "loss (bits)", "E[children]", "count error")?;
        for r in [&self.a, &self.b, &self.a_with_symbol_3] {
            let masses: Vec<String> =
                r.masses.iter().map(|(s, p)| format!("{s}:{p} ({})", s.count_ones())).collect();
            writeln!(
                f,
                "{:<4} {:<40} {:>14.10} {:>14.4} {:>12.4}",
                r.name,
                masses.join(" "),
                r.loss,
                r.expected_count,
                r.count_error
            )?;
        }
        write!(
            f,
            "loss(A) - loss(B) = {:.3e} bits; count error A = {:.4}, B = {:.4}",
            self.a.loss - self.b.loss,
            self.a.count_error,
            self.b.count_error
        )
    }
}
