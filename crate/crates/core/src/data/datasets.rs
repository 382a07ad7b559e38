//! Directory layouts of the supported datasets.
//!
//! SceneFlow: `<root>/frames_finalpass/**/left/*.png` with the matching
//! `right/` image and `<root>/disparity/**/left/*.pfm` ground truth.
//! KITTI 2015: `<root>/training/{image_2,image_3,disp_occ_0,obj_map}`.
//! KITTI 2012: `<root>/training/{colored_0,colored_1,disp_occ}`.

use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::data::{kitti, pfm};
use crate::error::{Error, Result};
use crate::types::StereoSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GtFormat {
    Pfm,
    KittiPng,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub id: String,
    pub left: PathBuf,
    pub right: PathBuf,
    pub disparity: Option<PathBuf>,
    pub format: GtFormat,
    /// Object map; non-zero pixels are foreground.
    pub foreground: Option<PathBuf>,
}

fn replace_component(path: &Path, from: &str, to: &str) -> PathBuf {
    path.components()
        .map(|c| {
            if c.as_os_str() == from {
                to.as_ref()
            } else {
                c.as_os_str()
            }
        })
        .collect()
}

fn split_of(rel: &Path) -> Split {
    if rel.components().any(|c| c.as_os_str().eq_ignore_ascii_case("test")) {
        Split::Test
    } else {
        Split::Train
    }
}

/// SceneFlow final-pass pairs of `split`, sorted by path.
pub fn sceneflow_pairs(root: &Path, split: Split) -> Result<Vec<PairPaths>> {
    let frames = root.join("frames_finalpass");
    if !frames.is_dir() {
        return Err(Error::io(
            &frames,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing frames_finalpass"),
        ));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(&frames).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(&frames, e.into()))?;
        let p = entry.path();
        let is_left = p.parent().and_then(|d| d.file_name()).is_some_and(|n| n == "left");
        if !is_left || p.extension().is_none_or(|e| e != "png") {
            continue;
        }
        let rel = p.strip_prefix(root).expect("walk stays under root");
        if split_of(rel) != split {
            continue;
        }
        let right = replace_component(p, "left", "right");
        let disparity = replace_component(p, "frames_finalpass", "disparity").with_extension("pfm");
        out.push(PairPaths {
            id: rel.display().to_string(),
            left: p.to_path_buf(),
            right,
            disparity: Some(disparity),
            format: GtFormat::Pfm,
            foreground: None,
        });
    }
    Ok(out)
}

/// KITTI training pairs (reference frames `*_10.png`), 2015 or 2012 layout.
pub fn kitti_pairs(root: &Path) -> Result<Vec<PairPaths>> {
    let training = root.join("training");
    let layouts = [
        ("image_2", "image_3", "disp_occ_0", Some("obj_map")),
        ("colored_0", "colored_1", "disp_occ", None),
    ];
    let Some(&(l, r, d, obj)) = layouts.iter().find(|(l, ..)| training.join(l).is_dir()) else {
        return Err(Error::io(
            &training,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no KITTI image directory"),
        ));
    };
    let mut names: Vec<String> = std::fs::read_dir(training.join(l))
        .map_err(|e| Error::io(training.join(l), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with("_10.png"))
        .collect();
    names.sort();
    Ok(names
        .into_iter()
        .map(|n| {
            let gt = training.join(d).join(&n);
            let fg = obj.map(|o| training.join(o).join(&n)).filter(|p| p.is_file());
            PairPaths {
                id: n.clone(),
                left: training.join(l).join(&n),
                right: training.join(r).join(&n),
                disparity: gt.is_file().then_some(gt),
                format: GtFormat::KittiPng,
                foreground: fg,
            }
        })
        .collect())
}

/// Load images and ground truth; the second value is the foreground mask
/// when an object map exists.
pub fn load_pair(p: &PairPaths) -> Result<(StereoSample, Option<Vec<bool>>)> {
    let mut s = StereoSample::new(kitti::read_rgb(&p.left)?, kitti::read_rgb(&p.right)?);
    if let Some(d) = &p.disparity {
        match p.format {
            GtFormat::Pfm => s.gt_disparity = Some(pfm::read_pfm(d)?),
            GtFormat::KittiPng => {
                let (map, mask) = kitti::read_kitti_disparity(d)?;
                s.gt_disparity = Some(map);
                s.valid_mask = Some(mask);
            }
        }
    }
    let fg = match &p.foreground {
        Some(f) => {
            let img = image::ImageReader::open(f)
                .map_err(|e| Error::io(f, e))?
                .decode()?
                .to_luma16();
            Some(img.as_raw().iter().map(|&v| v != 0).collect())
        }
        None => None,
    };
    Ok((s, fg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sceneflow_layout() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for split in ["TRAIN", "TEST"] {
            for side in ["left", "right"] {
                let d = root.join("frames_finalpass").join(split).join("A/0000").join(side);
                std::fs::create_dir_all(&d).unwrap();
                kitti::write_rgb(&d.join("0006.png"), &Tensor::full(&[3, 2, 3], 0.5)).unwrap();
            }
            let g = root.join("disparity").join(split).join("A/0000/left");
            std::fs::create_dir_all(&g).unwrap();
            pfm::write_pfm(&g.join("0006.pfm"), &Tensor::full(&[2, 3], 4.0)).unwrap();
        }
        let train = sceneflow_pairs(root, Split::Train).unwrap();
        assert_eq!(train.len(), 1);
        assert!(train[0].right.ends_with("TRAIN/A/0000/right/0006.png"));
        let (s, fg) = load_pair(&train[0]).unwrap();
        assert_eq!(s.gt_disparity.unwrap().get(&[1, 2]), 4.0);
        assert!(fg.is_none());
        assert_eq!(sceneflow_pairs(root, Split::Test).unwrap().len(), 1);
    }

    #[test]
    fn kitti_layout() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("training");
        for d in ["image_2", "image_3", "disp_occ_0"] {
            std::fs::create_dir_all(t.join(d)).unwrap();
        }
        for side in ["image_2", "image_3"] {
            kitti::write_rgb(&t.join(side).join("000000_10.png"), &Tensor::full(&[3, 2, 2], 0.1)).unwrap();
            kitti::write_rgb(&t.join(side).join("000000_11.png"), &Tensor::full(&[3, 2, 2], 0.1)).unwrap();
        }
        let gt = Tensor::from_vec(&[2, 2], vec![0.0, 10.0, 20.0, 30.0]).unwrap();
        kitti::write_kitti_disparity(&t.join("disp_occ_0/000000_10.png"), &gt).unwrap();
        let pairs = kitti_pairs(dir.path()).unwrap();
        assert_eq!(pairs.len(), 1);
        let (s, _) = load_pair(&pairs[0]).unwrap();
        assert_eq!(s.valid_mask.unwrap(), vec![false, true, true, true]);
    }
}
