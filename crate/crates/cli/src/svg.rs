//! Minimal SVG scatter render of the PCA projection, one color class
//! per frequency bucket.

use fcl_core::geometry::PcaProjection;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 48.0;

const PALETTE: [&str; 8] = [
    "#2166ac", "#67a9cf", "#5aae61", "#fdb863", "#d6604d", "#b2182b", "#762a83", "#4d4d4d",
];

fn bucket_label(b: usize, n_buckets: usize) -> String {
    if n_buckets == 3 {
        ["High", "Medium", "Low"][b].to_string()
    } else if b == 0 {
        format!("bucket {b} (frequent)")
    } else if b + 1 == n_buckets {
        format!("bucket {b} (rare)")
    } else {
        format!("bucket {b}")
    }
}

/// Render the projected points colored by bucket, with a legend and the
/// explained variances in the footer.
pub fn scatter(pca: &PcaProjection, bucket_of: &[usize], n_buckets: usize) -> String {
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in &pca.coords {
        min_x = min_x.min(c[0]);
        max_x = max_x.max(c[0]);
        min_y = min_y.min(c[1]);
        max_y = max_y.max(c[1]);
    }
    // Guard zero ranges so degenerate clouds still render.
    if max_x - min_x < 1e-12 {
        max_x += 0.5;
        min_x -= 0.5;
    }
    if max_y - min_y < 1e-12 {
        max_y += 0.5;
        min_y -= 0.5;
    }
    let sx = (WIDTH - 2.0 * MARGIN) / (max_x - min_x);
    let sy = (HEIGHT - 2.0 * MARGIN) / (max_y - min_y);
    let px = |x: f64| MARGIN + (x - min_x) * sx;
    // SVG y grows downward.
    let py = |y: f64| HEIGHT - MARGIN - (y - min_y) * sy;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" \
         stroke=\"#999\"/>\n",
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    ));
    for (c, &b) in pca.coords.iter().zip(bucket_of) {
        out.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.75\"/>\n",
            px(c[0]),
            py(c[1]),
            PALETTE[b % PALETTE.len()]
        ));
    }
    for b in 0..n_buckets {
        let y = MARGIN + 16.0 + 18.0 * b as f64;
        out.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{}\"/>\n",
            WIDTH - MARGIN - 130.0,
            y - 4.0,
            PALETTE[b % PALETTE.len()]
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
            WIDTH - MARGIN - 120.0,
            y,
            bucket_label(b, n_buckets)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"{:.2}\" font-size=\"12\" font-family=\"sans-serif\">\
         pc1 var {:.4}, pc2 var {:.4}</text>\n",
        HEIGHT - MARGIN + 28.0,
        pca.explained[0],
        pca.explained[1]
    ));
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_contains_one_circle_per_point_plus_legend() {
        let pca = PcaProjection {
            coords: vec![[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]],
            explained: [1.5, 0.25],
        };
        let svg = scatter(&pca, &[0, 1, 2], 3);
        assert_eq!(svg.matches("<circle").count(), 3 + 3);
        assert!(svg.contains("High") && svg.contains("Low"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn degenerate_cloud_still_renders() {
        let pca = PcaProjection { coords: vec![[0.5, 0.5]; 4], explained: [0.0, 0.0] };
        let svg = scatter(&pca, &[0; 4], 5);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
