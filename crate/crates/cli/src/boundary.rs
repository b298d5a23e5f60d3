//! Decision-boundary rasters for 2-D classifiers.

use anyhow::{bail, Result};
use paglab::data::Dataset;
use paglab::model::Mlp;

/// A regular grid of cell centers; row 0 is the top (largest `x2`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub x1: (f64, f64),
    pub x2: (f64, f64),
    pub width: usize,
    pub height: usize,
}

impl Grid {
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        let dx = (self.x1.1 - self.x1.0) / self.width as f64;
        let dy = (self.x2.1 - self.x2.0) / self.height as f64;
        (
            self.x1.0 + (col as f64 + 0.5) * dx,
            self.x2.1 - (row as f64 + 0.5) * dy,
        )
    }
}

/// Predicted class of every cell, row-major from the top-left.
pub fn predict_grid(model: &Mlp, grid: &Grid) -> Result<Vec<usize>> {
    if model.input_dim() != 2 {
        bail!("decision boundaries need a 2-D model, this one takes {} inputs", model.input_dim());
    }
    let mut out = Vec::with_capacity(grid.width * grid.height);
    for row in 0..grid.height {
        for col in 0..grid.width {
            let (a, b) = grid.center(row, col);
            out.push(model.predict(&[a, b])?);
        }
    }
    Ok(out)
}

const PALETTE: [[u8; 3]; 10] = [
    [70, 130, 180],
    [240, 128, 128],
    [144, 238, 144],
    [255, 215, 0],
    [186, 85, 211],
    [64, 224, 208],
    [255, 165, 0],
    [169, 169, 169],
    [199, 21, 133],
    [85, 107, 47],
];

/// Binary PPM (P6) with one color per class.
pub fn ppm(grid: &Grid, preds: &[usize]) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    for &p in preds {
        out.extend_from_slice(&PALETTE[p % PALETTE.len()]);
    }
    out
}

pub fn grid_csv(grid: &Grid, preds: &[usize]) -> String {
    let mut out = String::from("x1,x2,pred\n");
    for row in 0..grid.height {
        for col in 0..grid.width {
            let (a, b) = grid.center(row, col);
            out.push_str(&format!("{a:?},{b:?},{}\n", preds[row * grid.width + col]));
        }
    }
    out
}

pub fn points_csv(model: &Mlp, points: &Dataset) -> Result<String> {
    let mut out = String::from("x1,x2,label,pred\n");
    for i in 0..points.len() {
        let x = points.sample(i);
        out.push_str(&format!("{:?},{:?},{},{}\n", x[0], x[1], points.label(i), model.predict(x)?));
    }
    Ok(out)
}

/// Mean distance from the points of each class to the nearest grid cell
/// predicting a different class. `None` where no such cell exists.
#[derive(Clone, Debug, PartialEq)]
pub struct Margins {
    pub per_class: Vec<Option<f64>>,
    pub overall: Option<f64>,
}

pub fn margins(grid: &Grid, preds: &[usize], points: &Dataset) -> Margins {
    let classes = points.classes();
    let cells: Vec<(f64, f64, usize)> = (0..grid.height)
        .flat_map(|r| (0..grid.width).map(move |c| (r, c)))
        .map(|(r, c)| {
            let (a, b) = grid.center(r, c);
            (a, b, preds[r * grid.width + c])
        })
        .collect();

    let mut sums = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    let mut unreachable = vec![false; classes];
    for i in 0..points.len() {
        let (x, label) = (points.sample(i), points.label(i));
        let best = cells
            .iter()
            .filter(|c| c.2 != label)
            .map(|c| (c.0 - x[0]).powi(2) + (c.1 - x[1]).powi(2))
            .fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            sums[label] += best.sqrt();
            counts[label] += 1;
        } else {
            unreachable[label] = true;
        }
    }
    let per_class = (0..classes)
        .map(|c| (counts[c] > 0 && !unreachable[c]).then(|| sums[c] / counts[c] as f64))
        .collect();
    let total: usize = counts.iter().sum();
    let overall = (total == points.len() && total > 0).then(|| sums.iter().sum::<f64>() / total as f64);
    Margins { per_class, overall }
}

#[cfg(test)]
mod tests {
    use super::*;
    use paglab::data::Split;
    use paglab::model::Layer;
    use paglab::Tensor;

    fn linear(w: [f64; 4], b: [f64; 2]) -> Mlp {
        Mlp::from_layers(vec![Layer {
            weight: Tensor::matrix(2, 2, w.to_vec()).unwrap(),
            bias: Tensor::vector(b.to_vec()),
        }])
        .unwrap()
    }

    #[test]
    fn constant_model_single_color() {
        let grid = Grid {
            x1: (-1.0, 1.0),
            x2: (-1.0, 1.0),
            width: 7,
            height: 5,
        };
        let preds = predict_grid(&linear([0.0; 4], [0.0, 1.0]), &grid).unwrap();
        let img = ppm(&grid, &preds);
        let header = b"P6\n7 5\n255\n";
        assert_eq!(&img[..header.len()], header);
        let body = &img[header.len()..];
        assert_eq!(body.len(), 7 * 5 * 3);
        assert!(body.chunks(3).all(|px| px == PALETTE[1]));
    }

    #[test]
    fn margin_of_vertical_boundary() {
        // class 1 wins for x1 > 0
        let model = linear([-1.0, 0.0, 1.0, 0.0], [0.0, 0.0]);
        let grid = Grid {
            x1: (-10.0, 10.0),
            x2: (-10.0, 10.0),
            width: 20,
            height: 21,
        };
        let preds = predict_grid(&model, &grid).unwrap();
        let pts = Dataset::new(vec![-5.0, 0.0, 5.0, 0.0], vec![0, 1], 2, 2, Split::Test, "").unwrap();
        let m = margins(&grid, &preds, &pts);
        // odd height puts a row of centers on x2 = 0; columns sit at +-0.5
        assert!((m.per_class[0].unwrap() - 5.5).abs() < 1e-9);
        assert!((m.overall.unwrap() - 5.5).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_2d_models() {
        let m = Mlp::init(&[3, 2], 0).unwrap();
        let grid = Grid {
            x1: (0.0, 1.0),
            x2: (0.0, 1.0),
            width: 2,
            height: 2,
        };
        assert!(predict_grid(&m, &grid).is_err());
    }
}
