//! Long-format grid dumps for external plotting: one row per block with the
//! block centroid in feet.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use mfmzip::court::{CountMatrix, CourtGrid};
use ndarray::Array2;

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn check_grid(grid: &CourtGrid, n_blocks: usize) -> Result<()> {
    if n_blocks != grid.n_blocks() {
        bail!(
            "plot data needs the full {}-block court grid, input has {n_blocks} blocks",
            grid.n_blocks()
        );
    }
    Ok(())
}

/// One surface per labelled row of `values` (`rows x J`), with the label in
/// a trailing column named `label_name`.
pub fn write_surfaces(path: &Path, grid: &CourtGrid, values: &Array2<f64>, labels: &[String], label_name: &str) -> Result<()> {
    check_grid(grid, values.ncols())?;
    let mut w = create(path)?;
    writeln!(w, "block_x,block_y,value,{label_name}")?;
    for (row, label) in values.rows().into_iter().zip(labels) {
        for (j, v) in row.iter().enumerate() {
            let (x, y) = grid.centroid(j);
            writeln!(w, "{x},{y},{v},{label}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A single surface without a label column.
pub fn write_surface(path: &Path, grid: &CourtGrid, values: &[f64]) -> Result<()> {
    check_grid(grid, values.len())?;
    let mut w = create(path)?;
    writeln!(w, "block_x,block_y,value")?;
    for (j, v) in values.iter().enumerate() {
        let (x, y) = grid.centroid(j);
        writeln!(w, "{x},{y},{v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Shot counts of one player, or of every player labelled by id.
pub fn counts(path: &Path, grid: &CourtGrid, counts: &CountMatrix, player: Option<&str>) -> Result<()> {
    match player {
        Some(id) => {
            let Some(i) = counts.player_ids.iter().position(|p| p == id) else {
                bail!("player '{id}' is not in the count matrix");
            };
            let row: Vec<f64> = counts.y.row(i).iter().map(|&v| f64::from(v)).collect();
            write_surface(path, grid, &row)
        }
        None => write_surfaces(path, grid, &counts.y.mapv(f64::from), &counts.player_ids, "player_id"),
    }
}

/// Mean counts per block over the members of each cluster.
pub fn partition(path: &Path, grid: &CourtGrid, counts: &CountMatrix, ids: &[String], labels: &[usize]) -> Result<()> {
    let k = labels.iter().copied().max().unwrap_or(0);
    let mut sums = Array2::<f64>::zeros((k, counts.n_blocks()));
    let mut sizes = vec![0usize; k];
    for (id, &label) in ids.iter().zip(labels) {
        let Some(i) = counts.player_ids.iter().position(|p| p == id) else {
            bail!("partition lists player '{id}' missing from the counts");
        };
        if label == 0 {
            bail!("cluster labels are 1-based");
        }
        sums.row_mut(label - 1).zip_mut_with(&counts.y.row(i), |s, &c| *s += f64::from(c));
        sizes[label - 1] += 1;
    }
    for (mut row, &n) in sums.rows_mut().into_iter().zip(&sizes) {
        if n > 0 {
            row /= n as f64;
        }
    }
    let names: Vec<String> = (1..=k).map(|c| c.to_string()).collect();
    write_surfaces(path, grid, &sums, &names, "cluster")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn player_surface_conserves_shots() {
        let grid = CourtGrid::standard();
        let mut y = Array2::<u32>::zeros((2, 1175));
        y[[0, 5]] = 3;
        y[[0, 600]] = 4;
        y[[1, 9]] = 1;
        let c = CountMatrix::new(vec!["a".into(), "b".into()], y).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        counts(&path, &grid, &c, Some("a")).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 1175);
        let total: f64 = rows.iter().map(|r| r.split(',').nth(2).unwrap().parse::<f64>().unwrap()).sum();
        assert_eq!(total, 7.0);
        assert!(counts(&path, &grid, &c, Some("zz")).is_err());
    }

    #[test]
    fn partition_surfaces_average_members() {
        let grid = CourtGrid::standard();
        let mut y = Array2::<u32>::zeros((3, 1175));
        y[[0, 0]] = 2;
        y[[1, 0]] = 4;
        y[[2, 0]] = 9;
        let c = CountMatrix::new(vec!["a".into(), "b".into(), "c".into()], y).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let ids: Vec<String> = vec!["c".into(), "a".into(), "b".into()];
        partition(&path, &grid, &c, &ids, &[2, 1, 1]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "block_x,block_y,value,cluster");
        assert_eq!(lines.len(), 1 + 2 * 1175);
        assert_eq!(lines[1], "0.5,1,3,1");
        assert_eq!(lines[1 + 1175], "0.5,1,9,2");
    }

    #[test]
    fn reduced_grids_are_refused() {
        let grid = CourtGrid::standard();
        let dir = tempfile::tempdir().unwrap();
        assert!(write_surface(&dir.path().join("x.csv"), &grid, &[0.0; 200]).is_err());
    }
}
