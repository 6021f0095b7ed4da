//! Synthetic visually-discriminative corpus: items come in groups sharing a
//! title, distinguishable only by a colored shape rendered into the image.
//! A title-only model therefore cannot beat 1/m expected HR@1 within a group.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DataConfig;
use crate::corpus::{Conversation, Item, Speaker, Utterance};
use crate::error::{Error, Result};
use crate::image::Raster;

pub fn color_rgb(name: &str) -> Result<[u8; 3]> {
    Ok(match name {
        "red" => [220, 30, 30],
        "green" => [30, 180, 60],
        "blue" => [40, 70, 220],
        "yellow" => [235, 220, 40],
        "purple" => [150, 40, 200],
        "orange" => [240, 140, 30],
        "teal" => [30, 190, 190],
        "pink" => [240, 120, 190],
        "brown" => [140, 90, 40],
        "black" => [20, 20, 20],
        "white" => [250, 250, 250],
        other => {
            return Err(Error::Config(format!("unknown color name {other:?}")));
        }
    })
}

const BACKGROUND: [u8; 3] = [235, 235, 235];

fn render_shape(side: usize, shape: &str, rgb: [u8; 3]) -> Result<Raster> {
    let mut img = Raster::filled(side, BACKGROUND);
    let c = (side as f64 - 1.0) / 2.0;
    let r = side as f64 * 0.32;
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let inside = match shape {
                "circle" => dx * dx + dy * dy <= r * r,
                "square" => dx.abs() <= r && dy.abs() <= r,
                "triangle" => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
                "diamond" => dx.abs() + dy.abs() <= r * 1.2,
                "cross" => dx.abs() <= r * 0.4 || dy.abs() <= r * 0.4,
                other => {
                    return Err(Error::Config(format!("unknown shape name {other:?}")));
                }
            };
            if inside {
                img.set(x, y, rgb);
            }
        }
    }
    Ok(img)
}

/// Deterministic synthetic (catalog, conversations). Images are written as
/// PPM files under `images_dir`; catalog paths are `images/<id>.ppm`.
pub fn generate_synthetic(
    cfg: &DataConfig,
    images_dir: &Path,
    seed: u64,
) -> Result<(Vec<Item>, Vec<Conversation>)> {
    let m = cfg.group_size;
    if m < 2 || cfg.n_items % m != 0 {
        return Err(Error::Config(format!(
            "group size {m} must be >= 2 and divide n_items {}",
            cfg.n_items
        )));
    }
    if cfg.colors.len() < m {
        return Err(Error::Config(format!(
            "need at least {m} colors, got {}",
            cfg.colors.len()
        )));
    }
    std::fs::create_dir_all(images_dir)
        .map_err(|e| Error::io(images_dir.display().to_string(), e))?;

    let n_groups = cfg.n_items / m;
    let mut items = Vec::with_capacity(cfg.n_items);
    // member colors per group, for conversation construction
    let mut group_members: Vec<Vec<(String, String)>> = Vec::with_capacity(n_groups);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in 0..n_groups {
        let shape = &cfg.shapes[g % cfg.shapes.len()];
        let title = format!("{shape} {g:02}");
        let mut members = Vec::with_capacity(m);
        let mut rasters: Vec<Raster> = Vec::with_capacity(m);
        // per-group random palette: the member digit of an item ID must not
        // encode its color, or a text-only model could crack the mapping
        let mut palette = cfg.colors.clone();
        palette.shuffle(&mut rng);
        for j in 0..m {
            let color = &palette[j];
            let item_id = format!("IT{:04}{:04}", g, j);
            let img = render_shape(cfg.image_side, shape, color_rgb(color)?)?;
            img.save_ppm(&images_dir.join(format!("{item_id}.ppm")))?;
            items.push(Item {
                item_id: item_id.clone(),
                title: title.clone(),
                image_path: format!("images/{item_id}.ppm"),
            });
            members.push((item_id, color.clone()));
            rasters.push(img);
        }
        for a in 0..m {
            for b in a + 1..m {
                let diff = rasters[a].diff_pixels(&rasters[b]);
                if diff < cfg.min_pixel_diff {
                    return Err(Error::Integrity(format!(
                        "group {g}: images {a} and {b} differ in only {diff} pixels \
                         (minimum {})",
                        cfg.min_pixel_diff
                    )));
                }
            }
        }
        group_members.push(members);
    }

    let mut convs = Vec::with_capacity(cfg.n_convs);
    for c in 0..cfg.n_convs {
        let g = rng.gen_range(0..n_groups);
        let (item_id, color) = group_members[g].choose(&mut rng).unwrap().clone();
        let title = format!("{} {g:02}", cfg.shapes[g % cfg.shapes.len()]);
        let turns = vec![
            Utterance {
                speaker: Speaker::Seeker,
                text: format!("looking for a {title} in {color}"),
            },
            Utterance {
                speaker: Speaker::Recommender,
                text: format!("you should try {item_id}"),
            },
        ];
        convs.push(Conversation {
            conv_id: format!("C{c:05}"),
            turns,
            ground_truth: [(2, vec![item_id])].into_iter().collect(),
        });
    }
    Ok((items, convs))
}
