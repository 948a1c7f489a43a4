//! Binary portable pixmap (P6) export of volume slices, with optional label
//! overlay: myocardium (class 1) tinted green, blood pool (class 2) blue.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::volume::{Axis, Volume};

#[derive(Debug, Error)]
pub enum PixmapError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("slice index {index} out of range for extent {extent}")]
    SliceIndex { index: usize, extent: usize },
    #[error("overlay dims {overlay:?} differ from volume dims {volume:?}")]
    OverlayDims {
        overlay: (usize, usize, usize),
        volume: (usize, usize, usize),
    },
}

/// Render one slice as RGB bytes. Intensities are windowed to the slice's
/// min..max; a constant slice maps to mid-gray. Overlay classes blend 50/50
/// with pure green (1) and pure blue (2).
pub fn render_slice(
    v: &Volume<f32>,
    axis: Axis,
    index: usize,
    overlay: Option<&Volume<u8>>,
) -> Result<(usize, usize, Vec<u8>), PixmapError> {
    let extent = v.extent_along(axis);
    if index >= extent {
        return Err(PixmapError::SliceIndex { index, extent });
    }
    if let Some(labels) = overlay {
        if labels.dims != v.dims {
            return Err(PixmapError::OverlayDims {
                overlay: labels.dims,
                volume: v.dims,
            });
        }
    }

    let (rows, cols, data) = v.extract_slice(axis, index);
    let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    let window = |x: f32| -> u8 {
        if hi > lo {
            (((x - lo) / (hi - lo)) * 255.0).round() as u8
        } else {
            128
        }
    };
    let labels = overlay.map(|l| l.extract_slice(axis, index).2);

    let mut rgb = Vec::with_capacity(rows * cols * 3);
    for (i, &x) in data.iter().enumerate() {
        let g = window(x);
        let half = g / 2;
        let tinted = ((g as u16 + 255) / 2) as u8;
        match labels.as_ref().map(|l| l[i]).unwrap_or(0) {
            1 => rgb.extend_from_slice(&[half, tinted, half]),
            2 => rgb.extend_from_slice(&[half, half, tinted]),
            _ => rgb.extend_from_slice(&[g, g, g]),
        }
    }
    Ok((rows, cols, rgb))
}

/// Write the rendered slice as a binary P6 file, one pixel per voxel.
pub fn export_slice_pixmap(
    v: &Volume<f32>,
    axis: Axis,
    index: usize,
    overlay: Option<&Volume<u8>>,
    path: impl AsRef<Path>,
) -> Result<(), PixmapError> {
    let (rows, cols, rgb) = render_slice(v, axis, index, overlay)?;
    let mut bytes = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend_from_slice(&rgb);
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|source| PixmapError::Io {
        path: path.to_path_buf(),
        source,
    })
}
