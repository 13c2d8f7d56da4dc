use super::Point3;

/// Integer coordinates of a cubic window cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowId(pub [i64; 3]);

/// Cell index `floor((p + offset) / s_win)` per axis.
pub fn window_assign_offset(positions: &[Point3], s_win: f64, offset: f64) -> Vec<WindowId> {
    assert!(s_win > 0.0, "window size must be positive");
    positions
        .iter()
        .map(|p| WindowId([0, 1, 2].map(|a| ((p[a] + offset) / s_win).floor() as i64)))
        .collect()
}

/// Cubic windows of side `s_win`; the shifted grid is offset by half a window.
pub fn window_assign(positions: &[Point3], s_win: f64, shifted: bool) -> Vec<WindowId> {
    let offset = if shifted { 0.5 * s_win } else { 0.0 };
    window_assign_offset(positions, s_win, offset)
}
