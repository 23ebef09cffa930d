//! Writes a contact sheet of synthetic faces: rows are identities, columns
//! walk the age ladder, the last column is a degraded copy.

use timeweaver::synthlab::{degrade, gen_identity, render_face, AgeFactor, DegradeConfig};
use timeweaver::ImageTensor;

fn main() -> timeweaver::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "contact_sheet.png".into());
    let ages = [10u32, 30, 50, 70, 90];
    let ids = 4usize;
    let (cell, scale) = (32usize, 4usize);
    let cols = ages.len() + 1;
    let mut sheet = ImageTensor::filled(ids * cell * scale, cols * cell * scale, 3, 1.0);
    for r in 0..ids {
        let spec = gen_identity(r as u64);
        let mut tiles = Vec::new();
        for &a in &ages {
            tiles.push(render_face(&spec, &AgeFactor::from_age(a)?, 100 + r as u64).image);
        }
        let cfg = DegradeConfig { blur_sigma: 1.4, downscale_factor: 3, noise_sigma: 0.03, quant_levels: 32, seed: 1 };
        tiles.push(degrade(&tiles[2], &cfg)?);
        for (c, t) in tiles.iter().enumerate() {
            for y in 0..cell * scale {
                for x in 0..cell * scale {
                    for ch in 0..3 {
                        sheet.set(r * cell * scale + y, c * cell * scale + x, ch, t.get(y / scale, x / scale, ch));
                    }
                }
            }
        }
    }
    sheet.save_png(std::path::Path::new(&out))
}
