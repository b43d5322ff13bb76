//! Violin plots of normalized deviations, one SVG per (attack, metric).
//!
//! Each checkpoint gets a column. A KDE is drawn as a polygon mirrored around
//! the column center, scaled so its peak density spans [`HALF_WIDTH`]; a point
//! mass is drawn as a horizontal tick. A diamond marks the sample mean.
//!
//! Values map to pixels through [`YAxis::to_px`]:
//! `y = top + height * (max - v) / (max - min)`.

use std::path::{Path, PathBuf};

use super::write_atomic;
use crate::deviation::{DistributionSummary, Metric};
use crate::error::{Error, Result};

pub const HALF_WIDTH: f64 = 32.0;
pub const COLUMN_WIDTH: f64 = 90.0;
pub const DIAMOND_RADIUS: f64 = 5.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 50.0;
const PLOT_HEIGHT: f64 = 320.0;
const BOTTOM: f64 = 60.0;
const Y_TICKS: usize = 5;

/// Linear map from deviation values to SVG y coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YAxis {
    pub min: f64,
    pub max: f64,
    pub top: f64,
    pub height: f64,
}

impl YAxis {
    /// Spans 0 (or the smallest value if negative) to the largest plotted
    /// value, KDE grids included, plus 5% headroom.
    pub fn fit(groups: &[&DistributionSummary]) -> Self {
        let mut lo: f64 = 0.0;
        let mut hi = f64::NEG_INFINITY;
        for g in groups {
            lo = lo.min(g.min);
            hi = hi.max(g.max);
            if let Some(k) = &g.kde {
                lo = lo.min(k.grid[0]);
                hi = hi.max(k.grid[k.grid.len() - 1]);
            }
        }
        let span = hi - lo;
        let max = if span > 0.0 { hi + 0.05 * span } else { lo + 1.0 };
        YAxis {
            min: lo,
            max,
            top: TOP,
            height: PLOT_HEIGHT,
        }
    }

    pub fn to_px(&self, v: f64) -> f64 {
        self.top + self.height * (self.max - v) / (self.max - self.min)
    }
}

fn px(v: f64) -> String {
    format!("{v:.3}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// File name used for the plot of one (attack, metric).
pub fn violin_file_name(attack: &str, metric: Metric) -> String {
    format!("violin_{attack}_{metric}.svg")
}

/// Center x of the `i`-th column.
pub fn column_center(i: usize) -> f64 {
    LEFT + COLUMN_WIDTH * (i as f64 + 0.5)
}

/// Renders one plot. All summaries must share attack and metric; columns
/// follow the given order.
pub fn render_violin_svg(summaries: &[DistributionSummary]) -> Result<String> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::InvalidArgument("violin plot needs at least one group".into()))?;
    if summaries.iter().any(|s| s.attack != first.attack || s.metric != first.metric) {
        return Err(Error::InvalidArgument("violin plot groups must share attack and metric".into()));
    }
    let refs: Vec<&DistributionSummary> = summaries.iter().collect();
    let axis = YAxis::fit(&refs);
    let width = LEFT + COLUMN_WIDTH * summaries.len() as f64 + RIGHT;
    let height = TOP + PLOT_HEIGHT + BOTTOM;
    let bottom = TOP + PLOT_HEIGHT;

    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" \
         data-y-min=\"{:e}\" data-y-max=\"{:e}\" data-y-top=\"{}\" data-y-height=\"{}\">\n",
        px(width),
        px(height),
        px(width),
        px(height),
        axis.min,
        axis.max,
        px(axis.top),
        px(axis.height)
    ));
    s.push_str("<rect x=\"0\" y=\"0\" width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{} / {} distance</text>\n",
        px(width / 2.0),
        escape(&first.attack),
        first.metric
    ));

    // axes
    s.push_str(&format!(
        "<g class=\"axes\" stroke=\"black\" stroke-width=\"1\">\n<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\"/>\n<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\"/>\n</g>\n",
        l = px(LEFT),
        t = px(TOP),
        b = px(bottom),
        r = px(width - RIGHT)
    ));
    s.push_str("<g class=\"y-ticks\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">\n");
    for i in 0..=Y_TICKS {
        let v = axis.min + (axis.max - axis.min) * i as f64 / Y_TICKS as f64;
        let y = axis.to_px(v);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"black\"/><text x=\"{}\" y=\"{}\">{v:.3}</text>\n",
            px(LEFT - 5.0),
            px(LEFT),
            px(LEFT - 8.0),
            px(axis.to_px(v) + 4.0),
            y = px(y),
        ));
    }
    s.push_str("</g>\n");
    s.push_str(&format!(
        "<text x=\"20\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 20 {})\">normalized deviation</text>\n",
        px(TOP + PLOT_HEIGHT / 2.0),
        px(TOP + PLOT_HEIGHT / 2.0)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">checkpoint</text>\n",
        px(LEFT + COLUMN_WIDTH * summaries.len() as f64 / 2.0),
        px(height - 12.0)
    ));

    for (i, g) in summaries.iter().enumerate() {
        let cx = column_center(i);
        s.push_str(&format!(
            "<g class=\"group\" data-checkpoint=\"{}\" data-count=\"{}\">\n",
            g.checkpoint, g.count
        ));
        match &g.kde {
            Some(k) => {
                let peak = k.density.iter().copied().fold(0.0, f64::max);
                let scale = if peak > 0.0 { HALF_WIDTH / peak } else { 0.0 };
                let mut points: Vec<String> = Vec::with_capacity(2 * k.grid.len());
                for (v, d) in k.grid.iter().zip(&k.density) {
                    points.push(format!("{},{}", px(cx + d * scale), px(axis.to_px(*v))));
                }
                for (v, d) in k.grid.iter().zip(&k.density).rev() {
                    points.push(format!("{},{}", px(cx - d * scale), px(axis.to_px(*v))));
                }
                s.push_str(&format!(
                    "<polygon class=\"violin\" points=\"{}\" fill=\"#8fb8de\" fill-opacity=\"0.7\" stroke=\"#2d5f8b\" stroke-width=\"1\"/>\n",
                    points.join(" ")
                ));
            }
            None => {
                let y = px(axis.to_px(g.mean));
                s.push_str(&format!(
                    "<line class=\"point-mass\" x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#2d5f8b\" stroke-width=\"3\"/>\n",
                    px(cx - HALF_WIDTH),
                    px(cx + HALF_WIDTH)
                ));
            }
        }
        let my = axis.to_px(g.mean);
        let r = DIAMOND_RADIUS;
        s.push_str(&format!(
            "<polygon class=\"mean\" data-mean=\"{:e}\" points=\"{},{} {},{} {},{} {},{}\" fill=\"white\" stroke=\"black\" stroke-width=\"1\"/>\n",
            g.mean,
            px(cx),
            px(my - r),
            px(cx + r),
            px(my),
            px(cx),
            px(my + r),
            px(cx - r),
            px(my)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            px(cx),
            px(bottom + 18.0),
            g.checkpoint
        ));
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes one plot per (attack, metric) into `dir`, in first-appearance order.
pub fn render_all(summaries: &[DistributionSummary], dir: &Path) -> Result<Vec<PathBuf>> {
    if summaries.is_empty() {
        return Err(Error::InvalidArgument("no summaries to plot".into()));
    }
    let mut keys: Vec<(&str, Metric)> = Vec::new();
    for s in summaries {
        if !keys.contains(&(s.attack.as_str(), s.metric)) {
            keys.push((s.attack.as_str(), s.metric));
        }
    }
    keys.into_iter()
        .map(|(attack, metric)| {
            let group: Vec<DistributionSummary> = summaries
                .iter()
                .filter(|s| s.attack == attack && s.metric == metric)
                .cloned()
                .collect();
            let path = dir.join(violin_file_name(attack, metric));
            write_atomic(&path, render_violin_svg(&group)?.as_bytes())?;
            Ok(path)
        })
        .collect()
}
