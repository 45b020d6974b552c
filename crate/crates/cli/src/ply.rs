//! ASCII PLY export of a segmented cloud.

use partnet_core::geom::PointCloud;

pub const PALETTE_SIZE: usize = 64;

/// Colour of palette entry `i`: hues stepped by the golden angle at two
/// alternating saturation/value levels.
pub fn palette(i: usize) -> [u8; 3] {
    let i = i % PALETTE_SIZE;
    let h = (i as f64 * 137.507_764_050_037_85) % 360.0;
    let (s, v) = if i % 2 == 0 { (0.75, 0.95) } else { (0.55, 0.75) };
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let byte = |u: f64| ((u + m) * 255.0).round() as u8;
    [byte(r), byte(g), byte(b)]
}

/// Vertices `x y z nx ny nz red green blue`, coloured by instance id.
pub fn to_ply(cloud: &PointCloud, instance: &[usize]) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    for p in ["x", "y", "z", "nx", "ny", "nz"] {
        out.push_str(&format!("property float {p}\n"));
    }
    for p in ["red", "green", "blue"] {
        out.push_str(&format!("property uchar {p}\n"));
    }
    out.push_str("end_header\n");
    for ((p, n), &id) in cloud.positions().iter().zip(cloud.normals()).zip(instance) {
        let [r, g, b] = palette(id);
        out.push_str(&format!("{} {} {} {} {} {} {r} {g} {b}\n", p.x as f32, p.y as f32, p.z as f32, n.x as f32, n.y as f32, n.z as f32));
    }
    out
}
