use super::{Image, Plane};

/// Studio-swing luma: `16/255 + (65.481 R + 128.553 G + 24.966 B) / 255`.
pub fn rgb_to_y(img: &Image) -> Plane {
    Plane::from_fn(img.height(), img.width(), |y, x| {
        let (r, g, b) = (img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
        (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
    })
}

pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lab {
    pub l: Plane,
    pub a: Plane,
    pub b: Plane,
}

const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let fx = lab_f(x / WHITE_D65[0]);
    let fy = lab_f(y / WHITE_D65[1]);
    let fz = lab_f(z / WHITE_D65[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// sRGB (D65) to CIELAB; `L` in `[0, 100]`.
pub fn rgb_to_lab(img: &Image) -> Lab {
    let (h, w) = (img.height(), img.width());
    let mut l = Vec::with_capacity(h * w);
    let mut a = Vec::with_capacity(h * w);
    let mut b = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let lab = pixel_to_lab([img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)]);
            l.push(lab[0]);
            a.push(lab[1]);
            b.push(lab[2]);
        }
    }
    Lab {
        l: Plane { height: h, width: w, data: l },
        a: Plane { height: h, width: w, data: a },
        b: Plane { height: h, width: w, data: b },
    }
}
