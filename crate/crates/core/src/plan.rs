//! Per-layer, per-head window allocation.
//!
//! Layers and heads are each split into four equal groups (shallow to deep,
//! lowest to highest head index). A strategy assigns one multiplier ladder to
//! the layer groups and one to the head groups; the window of head `j` in layer
//! `i` is `base · layer_ladder[group(i)] · head_ladder[group(j)]`. Strategies
//! that do not vary along an axis use the ladder `{1, 1, 1, 1}` for it.
//!
//! All window arithmetic is exact: multipliers are rationals, and a base
//! window that would yield a fractional window is rejected.

use std::fmt;
use std::str::FromStr;

use num_integer::Integer;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rational = Ratio<u64>;

const GROUPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Every head in every layer uses the base window.
    Uniform,
    /// Head groups use `{¼, ½, 1, 2}·w`.
    MswaH,
    /// Layer groups use `{¼, ½, 1, 2}·w`, shallow to deep.
    MswaL,
    /// Both ladders composed.
    Mswa,
    /// Layer ladder reversed to `{2, 1, ½, ¼}`, head ladder unchanged.
    MswaReversedLayers,
    /// Both ladders replaced by the arithmetic progression `{½, ¾, 1, 5/4}`.
    MswaArithmetic,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Uniform,
        Strategy::MswaH,
        Strategy::MswaL,
        Strategy::Mswa,
        Strategy::MswaReversedLayers,
        Strategy::MswaArithmetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::MswaH => "mswa-h",
            Strategy::MswaL => "mswa-l",
            Strategy::Mswa => "mswa",
            Strategy::MswaReversedLayers => "mswa-reversed-layers",
            Strategy::MswaArithmetic => "mswa-arithmetic",
        }
    }

    fn ladders(self) -> (Option<[Rational; 4]>, Option<[Rational; 4]>) {
        let r = Rational::new;
        let geometric = [r(1, 4), r(1, 2), r(1, 1), r(2, 1)];
        let reversed = [r(2, 1), r(1, 1), r(1, 2), r(1, 4)];
        let arithmetic = [r(1, 2), r(3, 4), r(1, 1), r(5, 4)];
        match self {
            Strategy::Uniform => (None, None),
            Strategy::MswaH => (None, Some(geometric)),
            Strategy::MswaL => (Some(geometric), None),
            Strategy::Mswa => (Some(geometric), Some(geometric)),
            Strategy::MswaReversedLayers => (Some(reversed), Some(geometric)),
            Strategy::MswaArithmetic => (Some(arithmetic), Some(arithmetic)),
        }
    }

    pub fn varies_layers(self) -> bool {
        self.ladders().0.is_some()
    }

    pub fn varies_heads(self) -> bool {
        self.ladders().1.is_some()
    }

    /// Smallest modulus the base window must satisfy so every window is an integer.
    pub fn base_modulus(self) -> usize {
        let (layers, heads) = self.ladders();
        let one = [Rational::from_integer(1); 4];
        let (layers, heads) = (layers.unwrap_or(one), heads.unwrap_or(one));
        layers
            .iter()
            .flat_map(|a| heads.iter().map(move |b| (a * b).denom().to_owned()))
            .fold(1u64, |acc, d| acc.lcm(&d)) as usize
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let alias = match key.as_str() {
            "swa" => "uniform",
            "mswa-reversed" => "mswa-reversed-layers",
            other => other,
        };
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == alias)
            .ok_or_else(|| Error::InvalidPlan(format!("unknown strategy `{s}`")))
    }
}

/// Window-size matrix: `layers` rows of `heads` windows each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    layers: usize,
    heads: usize,
    base_window: usize,
    strategy: Strategy,
    sizes: Vec<usize>,
}

/// Exact window budget of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub total_windows: u64,
    /// `total_windows / (w·h·l)`, reduced.
    pub ratio_to_uniform: Rational,
}

fn group_of(index: usize, count: usize) -> usize {
    index / (count / GROUPS)
}

impl WindowPlan {
    pub fn build(strategy: Strategy, layers: usize, heads: usize, base_window: usize) -> Result<Self> {
        for (param, value) in [("layers", layers), ("heads", heads), ("base", base_window)] {
            if value == 0 {
                return Err(Error::InvalidPlan(format!("{param} must be positive")));
            }
        }
        if strategy.varies_layers() && !layers.is_multiple_of(GROUPS) {
            return Err(Error::Plan { param: "layers", value: layers, modulus: GROUPS });
        }
        if strategy.varies_heads() && !heads.is_multiple_of(GROUPS) {
            return Err(Error::Plan { param: "heads", value: heads, modulus: GROUPS });
        }
        let modulus = strategy.base_modulus();
        if !base_window.is_multiple_of(modulus) {
            return Err(Error::Plan { param: "base", value: base_window, modulus });
        }

        let (layer_ladder, head_ladder) = strategy.ladders();
        let base = Rational::from_integer(base_window as u64);
        let mut sizes = Vec::with_capacity(layers * heads);
        for i in 0..layers {
            let layer_mult = layer_ladder.map_or(Rational::from_integer(1), |l| l[group_of(i, layers)]);
            for j in 0..heads {
                let head_mult = head_ladder.map_or(Rational::from_integer(1), |l| l[group_of(j, heads)]);
                let w = base * layer_mult * head_mult;
                debug_assert!(w.is_integer());
                sizes.push(w.to_integer() as usize);
            }
        }
        Ok(WindowPlan { layers, heads, base_window, strategy, sizes })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn base_window(&self) -> usize {
        self.base_window
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Window of head `head` in layer `layer`.
    pub fn window(&self, layer: usize, head: usize) -> usize {
        self.sizes[layer * self.heads + head]
    }

    pub fn row(&self, layer: usize) -> &[usize] {
        &self.sizes[layer * self.heads..(layer + 1) * self.heads]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.sizes.chunks(self.heads)
    }

    pub fn total_budget(&self) -> Budget {
        let total: u64 = self.sizes.iter().map(|&w| w as u64).sum();
        let uniform = (self.base_window * self.heads * self.layers) as u64;
        Budget { total_windows: total, ratio_to_uniform: Rational::new(total, uniform) }
    }

    pub fn relative_cost_exact(&self, reference: &WindowPlan) -> Result<Rational> {
        if self.layers != reference.layers || self.heads != reference.heads {
            return Err(Error::Comparability {
                lhs_layers: self.layers,
                lhs_heads: self.heads,
                rhs_layers: reference.layers,
                rhs_heads: reference.heads,
            });
        }
        Ok(Rational::new(self.total_budget().total_windows, reference.total_budget().total_windows))
    }

    /// Budget of this plan over the budget of `reference`.
    pub fn relative_cost(&self, reference: &WindowPlan) -> Result<f64> {
        let r = self.relative_cost_exact(reference)?;
        Ok(*r.numer() as f64 / *r.denom() as f64)
    }

    /// Plain-text table: a `l h w strategy` header, then one line per layer.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {} {}\n", self.layers, self.heads, self.base_window, self.strategy);
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|w| w.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses the text table and checks it against the plan its header describes.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::InvalidPlan("missing header line".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let [l, h, w, strategy] = fields[..] else {
            return Err(Error::InvalidPlan(format!("malformed header `{header}`")));
        };
        let parse = |name: &str, v: &str| {
            v.parse::<usize>().map_err(|_| Error::InvalidPlan(format!("{name} `{v}` is not a count")))
        };
        let plan = WindowPlan::build(strategy.parse()?, parse("l", l)?, parse("h", h)?, parse("w", w)?)?;

        let mut sizes = Vec::with_capacity(plan.sizes.len());
        for (i, line) in lines.enumerate() {
            let row: Vec<usize> = line.split_whitespace().map(|v| parse("window", v)).collect::<Result<_>>()?;
            if row.len() != plan.heads {
                return Err(Error::InvalidPlan(format!("row {i} has {} entries, expected {}", row.len(), plan.heads)));
            }
            sizes.extend(row);
        }
        if sizes.len() != plan.sizes.len() {
            return Err(Error::InvalidPlan(format!(
                "expected {} rows, found {}",
                plan.layers,
                sizes.len() / plan.heads.max(1)
            )));
        }
        if sizes != plan.sizes {
            return Err(Error::InvalidPlan(format!("window table does not match strategy {}", plan.strategy)));
        }
        Ok(plan)
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {} ratio {}/{}",
            self.total_windows,
            self.ratio_to_uniform.numer(),
            self.ratio_to_uniform.denom()
        )
    }
}
