//! Line and grouped-bar charts, plus the ROC / loss / metric figures.

use super::{Anchor, Canvas, Color, Item, PALETTE};
use crate::metrics::RocCurve;
use crate::training::PhaseHistory;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: Color,
    pub dashed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub x_ticks: Vec<(f64, String)>,
    pub y_ticks: Vec<(f64, String)>,
    pub series: Vec<Series>,
    pub width: u32,
    pub height: u32,
}

const LEFT: f64 = 72.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 44.0;
const BOTTOM: f64 = 62.0;

fn even_ticks(lo: f64, hi: f64, n: usize) -> Vec<(f64, String)> {
    (0..=n)
        .map(|i| {
            let v = lo + (hi - lo) * i as f64 / n as f64;
            (v, format!("{v:.2}"))
        })
        .collect()
}

fn frame(c: &mut Canvas, title: &str, x_label: &str, y_label: &str) -> (f64, f64, f64, f64) {
    let (w, h) = (c.width as f64, c.height as f64);
    let (x0, y0, x1, y1) = (LEFT, TOP, w - RIGHT, h - BOTTOM);
    c.text(w / 2.0, 20.0, title, 2, Anchor::Middle);
    c.text((x0 + x1) / 2.0, h - 16.0, x_label, 1, Anchor::Middle);
    c.push(Item::Text {
        x: 16.0,
        y: (y0 + y1) / 2.0,
        text: y_label.to_string(),
        color: Color::BLACK,
        scale: 1,
        anchor: Anchor::Middle,
        vertical: true,
    });
    (x0, y0, x1, y1)
}

fn legend(c: &mut Canvas, entries: &[(String, Color, bool)], x: f64, y: f64) {
    for (i, (name, color, dashed)) in entries.iter().enumerate() {
        let yy = y + 18.0 * i as f64;
        c.push(Item::Line { x1: x, y1: yy, x2: x + 22.0, y2: yy, color: *color, width: 3.0, dashed: *dashed });
        c.text(x + 28.0, yy, name.clone(), 1, Anchor::Start);
    }
}

/// Renders a line chart. Points outside the ranges are clamped to the frame.
pub fn line_chart(chart: &LineChart) -> Canvas {
    let mut c = Canvas::new(chart.width, chart.height);
    let (x0, y0, x1, y1) = frame(&mut c, &chart.title, &chart.x_label, &chart.y_label);
    let (xl, xh) = chart.x_range;
    let (yl, yh) = chart.y_range;
    let sx = |v: f64| x0 + (v.clamp(xl, xh) - xl) / (xh - xl).max(f64::EPSILON) * (x1 - x0);
    let sy = |v: f64| y1 - (v.clamp(yl, yh) - yl) / (yh - yl).max(f64::EPSILON) * (y1 - y0);
    for (v, label) in &chart.y_ticks {
        let y = sy(*v);
        c.line((x0, y), (x1, y), Color::GRID, 1.0);
        c.text(x0 - 6.0, y, label.clone(), 1, Anchor::End);
    }
    for (v, label) in &chart.x_ticks {
        let x = sx(*v);
        c.line((x, y1), (x, y1 + 5.0), Color::BLACK, 1.0);
        c.text(x, y1 + 14.0, label.clone(), 1, Anchor::Middle);
    }
    c.line((x0, y1), (x1, y1), Color::BLACK, 1.0);
    c.line((x0, y0), (x0, y1), Color::BLACK, 1.0);
    for s in &chart.series {
        let points = s.points.iter().map(|&(x, y)| (sx(x), sy(y))).collect();
        c.push(Item::Polyline { points, color: s.color, width: 2.0, dashed: s.dashed });
    }
    let entries: Vec<_> = chart.series.iter().map(|s| (s.name.clone(), s.color, s.dashed)).collect();
    legend(&mut c, &entries, x1 + 14.0, y0 + 10.0);
    c
}

/// One group of bars, e.g. a dataset, with one value per metric.
#[derive(Clone, Debug, PartialEq)]
pub struct BarGroup {
    pub label: String,
    pub values: Vec<Option<f64>>,
}

/// Grouped bars on a `[0, 1]` axis. Undefined values are marked `n/a`.
pub fn bar_chart(title: &str, metrics: &[String], groups: &[BarGroup]) -> Canvas {
    let width = (LEFT + RIGHT + 40.0 + groups.len() as f64 * (metrics.len() as f64 * 22.0 + 30.0)).max(560.0);
    let mut c = Canvas::new(width as u32, 440);
    let (x0, y0, x1, y1) = frame(&mut c, title, "", "score");
    let sy = |v: f64| y1 - v.clamp(0.0, 1.0) * (y1 - y0);
    for (v, label) in even_ticks(0.0, 1.0, 5) {
        c.line((x0, sy(v)), (x1, sy(v)), Color::GRID, 1.0);
        c.text(x0 - 6.0, sy(v), label, 1, Anchor::End);
    }
    let slot = (x1 - x0) / groups.len().max(1) as f64;
    let bar = (slot * 0.8 / metrics.len().max(1) as f64).min(40.0);
    for (g, group) in groups.iter().enumerate() {
        let start = x0 + slot * g as f64 + (slot - bar * metrics.len() as f64) / 2.0;
        for (m, v) in group.values.iter().enumerate() {
            let x = start + bar * m as f64;
            match v {
                Some(v) => {
                    let top = sy(*v);
                    c.push(Item::Rect { x, y: top, w: bar - 2.0, h: y1 - top, fill: PALETTE[m % PALETTE.len()] });
                }
                None => c.text(x + bar / 2.0, y1 - 10.0, "n/a", 1, Anchor::Middle),
            }
        }
        c.text(x0 + slot * (g as f64 + 0.5), y1 + 14.0, group.label.clone(), 1, Anchor::Middle);
    }
    c.line((x0, y1), (x1, y1), Color::BLACK, 1.0);
    c.line((x0, y0), (x0, y1), Color::BLACK, 1.0);
    let entries: Vec<_> = metrics.iter().enumerate().map(|(i, m)| (m.clone(), PALETTE[i % PALETTE.len()], false)).collect();
    legend(&mut c, &entries, x1 + 14.0, y0 + 10.0);
    c
}

/// Overlaid ROC curves with the chance diagonal; legend entries carry AUC.
pub fn roc_chart(title: &str, curves: &[(String, &RocCurve)]) -> LineChart {
    let mut series: Vec<Series> = curves
        .iter()
        .enumerate()
        .map(|(i, (name, roc))| Series {
            name: format!("{name} (AUC {:.3})", roc.auc),
            points: roc.points.clone(),
            color: PALETTE[i % PALETTE.len()],
            dashed: false,
        })
        .collect();
    series.push(Series { name: "chance".into(), points: vec![(0.0, 0.0), (1.0, 1.0)], color: Color::GREY, dashed: true });
    LineChart {
        title: title.to_string(),
        x_label: "false positive rate".into(),
        y_label: "true positive rate".into(),
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
        x_ticks: even_ticks(0.0, 1.0, 5),
        y_ticks: even_ticks(0.0, 1.0, 5),
        series,
        width: 700,
        height: 520,
    }
}

/// Train and validation loss of one phase, one x tick per epoch.
pub fn loss_chart(title: &str, phase: &PhaseHistory) -> LineChart {
    let pts = |f: fn(&crate::training::EpochRecord) -> f64| -> Vec<(f64, f64)> {
        phase.epochs.iter().map(|r| (r.epoch as f64, f(r))).collect()
    };
    let train = pts(|r| r.train_loss);
    let val = pts(|r| r.val_loss);
    let max = train.iter().chain(&val).map(|p| p.1).filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let top = if max > 0.0 { max * 1.1 } else { 1.0 };
    let n = phase.epochs.len();
    LineChart {
        title: title.to_string(),
        x_label: "epoch".into(),
        y_label: "BCE loss".into(),
        x_range: (0.5, n as f64 + 0.5),
        y_range: (0.0, top),
        x_ticks: phase.epochs.iter().map(|r| (r.epoch as f64, r.epoch.to_string())).collect(),
        y_ticks: (0..=4).map(|i| (top * i as f64 / 4.0, format!("{:.3}", top * i as f64 / 4.0))).collect(),
        series: vec![
            Series { name: "train loss".into(), points: train, color: PALETTE[0], dashed: false },
            Series { name: "val loss".into(), points: val, color: PALETTE[1], dashed: true },
        ],
        width: 700,
        height: 440,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::DatasetId;
    use crate::training::{EpochRecord, Monitor, StopReason};

    #[test]
    fn loss_chart_has_one_tick_per_epoch() {
        let phase = PhaseHistory {
            phase: 1,
            dataset: DatasetId::Synthetic,
            monitor: Monitor::ValAuc,
            epochs: (1..=10)
                .map(|e| EpochRecord { phase: 1, epoch: e, train_loss: 1.0 / e as f64, val_loss: 0.5, val_auc: Some(0.8), lr: 1e-3 })
                .collect(),
            best_epoch: Some(10),
            stop_reason: StopReason::MaxEpochs,
            restored_best: true,
        };
        let chart = loss_chart("loss", &phase);
        assert_eq!(chart.x_ticks.len(), 10);
        assert!(chart.series.iter().all(|s| s.points.len() == 10));
    }

    #[test]
    fn perfect_roc_passes_through_top_left() {
        let roc = crate::metrics::roc_auc(&[0.9, 0.1], &[1, 0]).unwrap();
        let chart = roc_chart("roc", &[("perfect".into(), &roc)]);
        assert!(chart.series[0].points.contains(&(0.0, 1.0)));
        assert!(chart.series[0].name.contains("AUC 1.000"));
    }
}
