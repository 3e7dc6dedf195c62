//! Static PNG bar charts: one bar per labelled value, auto-scaled value
//! axis with gridlines, annotations in the built-in bitmap font.

use std::path::Path;

use jdd_core::{Error, Result};

use crate::font::{draw_text, text_width, GLYPH_HEIGHT};

const BACKGROUND: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [30, 30, 30];
const GRID: [u8; 3] = [215, 215, 215];
const BAR: [u8; 3] = [70, 110, 170];
const TEXT: [u8; 3] = [20, 20, 20];

const MARGIN_LEFT: u32 = 52;
const MARGIN_RIGHT: u32 = 10;
const MARGIN_TOP: u32 = 24;
const MARGIN_BOTTOM: u32 = 30;

/// Renders a bar chart of `(label, value)` pairs to a PNG of exactly
/// `width` x `height` pixels. Non-finite values render as full-height bars
/// annotated "INF".
pub fn bar_chart(
    path: &Path,
    title: &str,
    bars: &[(String, f64)],
    width: u32,
    height: u32,
) -> Result<()> {
    if bars.is_empty() {
        return Err(Error::InvalidArgument(
            "chart needs at least one bar".into(),
        ));
    }
    if width < 160 || height < 100 {
        return Err(Error::InvalidArgument(format!(
            "chart size {width}x{height} below minimum 160x100"
        )));
    }
    let mut canvas = image::RgbImage::from_pixel(width, height, image::Rgb(BACKGROUND));

    let plot_left = MARGIN_LEFT;
    let plot_right = width - MARGIN_RIGHT;
    let plot_top = MARGIN_TOP;
    let plot_bottom = height - MARGIN_BOTTOM;
    let plot_w = plot_right - plot_left;
    let plot_h = plot_bottom - plot_top;

    let finite_max = bars
        .iter()
        .map(|(_, v)| if v.is_finite() { *v } else { 0.0 })
        .fold(0.0_f64, f64::max);
    let scale_max = if finite_max > 0.0 {
        finite_max * 1.05
    } else {
        1.0
    };

    // Horizontal gridlines with tick labels.
    for tick in 0..=4u32 {
        let frac = tick as f64 / 4.0;
        let y = plot_bottom - (frac * plot_h as f64).round() as u32;
        if tick > 0 {
            for x in plot_left..plot_right {
                canvas.put_pixel(x, y, image::Rgb(GRID));
            }
        }
        let label = format_value(scale_max * frac);
        let tx = plot_left as i64 - text_width(&label, 1) as i64 - 4;
        draw_text(&mut canvas, tx.max(0), y as i64 - 3, &label, 1, TEXT);
    }

    // Bars with value annotations and bottom labels.
    let slot = plot_w as f64 / bars.len() as f64;
    for (i, (label, value)) in bars.iter().enumerate() {
        let slot_left = plot_left as f64 + i as f64 * slot;
        let bar_w = (slot * 0.6).max(1.0);
        let bar_left = slot_left + (slot - bar_w) / 2.0;
        let frac = if value.is_finite() {
            (value / scale_max).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let bar_h = (frac * plot_h as f64).round() as u32;
        let x0 = bar_left.round() as u32;
        let x1 = ((bar_left + bar_w).round() as u32).min(plot_right);
        for x in x0..x1 {
            for y in plot_bottom - bar_h..plot_bottom {
                canvas.put_pixel(x, y, image::Rgb(BAR));
            }
        }

        let annotation = if value.is_finite() {
            format_value(*value)
        } else {
            "INF".to_string()
        };
        let center = (x0 + x1) as i64 / 2;
        let text_gap = GLYPH_HEIGHT as i64 + 2;
        let ty = (plot_bottom - bar_h) as i64 - text_gap;
        draw_text(
            &mut canvas,
            center - text_width(&annotation, 1) as i64 / 2,
            ty.max(plot_top as i64 - text_gap),
            &annotation,
            1,
            TEXT,
        );
        let max_chars = (slot as usize / 6).max(1);
        let short: String = label.chars().take(max_chars).collect();
        draw_text(
            &mut canvas,
            center - text_width(&short, 1) as i64 / 2,
            plot_bottom as i64 + 4,
            &short,
            1,
            TEXT,
        );
    }

    // Axes over the grid, title last.
    for x in plot_left..=plot_right.min(width - 1) {
        canvas.put_pixel(x, plot_bottom, image::Rgb(AXIS));
    }
    for y in plot_top..=plot_bottom {
        canvas.put_pixel(plot_left, y, image::Rgb(AXIS));
    }
    draw_text(&mut canvas, plot_left as i64, 4, title, 2, TEXT);

    canvas
        .save(path)
        .map_err(|e| Error::bad_file(path, format!("failed to write chart: {e}")))
}

fn format_value(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Parses a `WIDTHxHEIGHT` chart-size flag.
pub fn parse_size(text: &str) -> Result<(u32, u32)> {
    let err = || Error::InvalidArgument(format!("chart size must look like 640x400, got {text:?}"));
    let (w, h) = text.split_once(['x', 'X']).ok_or_else(err)?;
    let width = w.trim().parse().map_err(|_| err())?;
    let height = h.trim().parse().map_err(|_| err())?;
    Ok((width, height))
}
