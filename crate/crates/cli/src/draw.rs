use std::fmt::Write;

use abfpe::{Box2, Fingertips};
use image::{Rgb, RgbImage};

pub const FINGER_COLORS: [[u8; 3]; 5] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

/// Copy of `image` with the hand box (pixel coordinates) and a ringed dot per fingertip.
pub fn overlay(image: &RgbImage, bbox_px: &Box2, tips: &Fingertips) -> RgbImage {
    let mut img = image.clone();
    let yellow = [255, 220, 0];
    let (x0, y0) = (bbox_px.x_min.floor() as i64, bbox_px.y_min.floor() as i64);
    let (x1, y1) = (bbox_px.x_max.ceil() as i64 - 1, bbox_px.y_max.ceil() as i64 - 1);
    for x in x0..=x1 {
        put(&mut img, x, y0, yellow);
        put(&mut img, x, y1, yellow);
    }
    for y in y0..=y1 {
        put(&mut img, x0, y, yellow);
        put(&mut img, x1, y, yellow);
    }
    for (slot, tip) in tips.slots.iter().enumerate() {
        let Some(p) = tip else { continue };
        let (cx, cy) = (p.x.floor() as i64, p.y.floor() as i64);
        for dy in -6i64..=6 {
            for dx in -6i64..=6 {
                let d2 = dx * dx + dy * dy;
                if d2 <= 9 {
                    put(&mut img, cx + dx, cy + dy, FINGER_COLORS[slot]);
                } else if (25..=36).contains(&d2) {
                    put(&mut img, cx + dx, cy + dy, [255, 255, 255]);
                }
            }
        }
    }
    img
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Overlaid step curves of `(threshold px, fraction)` as a standalone SVG document.
pub fn cde_svg(curves: &[(String, Vec<(f64, f64)>)], note: &str) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 180.0, 20.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let x_max = curves
        .iter()
        .flat_map(|(_, c)| c.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let sx = |x: f64| left + x / x_max * pw;
    let sy = |y: f64| top + (1.0 - y) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<!-- {} -->", escape(note).replace("--", "- -"));
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{l}" y1="{py:.2}" x2="{r:.2}" y2="{py:.2}" stroke="#ddd"/><text x="{tx}" y="{ty:.2}" text-anchor="end">{y:.1}</text>"##,
            l = left,
            r = left + pw,
            py = sy(y),
            tx = left - 6.0,
            ty = sy(y) + 4.0
        );
    }
    for i in 0..=5 {
        let x = x_max * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{px:.2}" y="{ty}" text-anchor="middle">{x:.1}</text>"#,
            px = sx(x),
            ty = top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{}" text-anchor="middle">threshold (px)</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">fraction of images</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (label, curve)) in curves.iter().enumerate() {
        let color = hex(FINGER_COLORS[i % FINGER_COLORS.len()]);
        let mut d = String::new();
        for (k, &(x, y)) in curve.iter().enumerate() {
            if k == 0 {
                let _ = write!(d, "M{:.2},{:.2}", sx(x), sy(y));
            } else {
                let _ = write!(d, " H{:.2} V{:.2}", sx(x), sy(y));
            }
        }
        let _ = writeln!(
            s,
            r#"<path class="cde" d="{d}" fill="none" stroke="{color}" stroke-width="2"/>"#
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.2}" y2="{ly}" stroke="{color}" stroke-width="2"/><text class="label" x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}
