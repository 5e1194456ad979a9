//! One synthetic scene: objects, image labels, saliency segments and a
//! text rendering of the strongest class channel per cell.

use wsodlab::scene::{foreground_segments, generate_scene, saliency_map, SceneConfig, FOREGROUND_THRESHOLD};

fn main() -> wsodlab::Result<()> {
    let config = SceneConfig::default();
    let scene = generate_scene(7, &config)?;
    println!("labels {:?}", scene.labels);
    for g in &scene.gt_boxes {
        println!("class {} at {:?}", g.class, g.bbox);
    }
    let obs = scene.observe();
    let sal = saliency_map(&obs);
    let segments = foreground_segments(&sal, FOREGROUND_THRESHOLD);
    println!("{} foreground segments", segments.len());
    for s in &segments {
        println!("  {} cells, bounding box {:?}", s.cells.len(), s.bbox);
    }

    let (h, w, c) = (scene.height(), scene.width(), config.in_channels);
    let grid = scene.grid.data();
    for y in 0..h {
        let row: String = (0..w)
            .map(|x| {
                let cell = &grid[(y * w + x) * c..(y * w + x + 1) * c];
                let (k, v) = cell
                    .iter()
                    .enumerate()
                    .fold((0, f64::MIN), |a, (k, &v)| if v > a.1 { (k, v) } else { a });
                if v > 0.7 {
                    char::from(b'A' + k as u8)
                } else if v > 0.4 {
                    char::from(b'a' + k as u8)
                } else {
                    '.'
                }
            })
            .collect();
        println!("{row}");
    }
    Ok(())
}
