use thiserror::Error;

/// Cell content of a parsed layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Free,
    Key,
    Door,
    Reward,
    Start,
}

impl Cell {
    fn from_char(c: char) -> Option<Self> {
        Some(match c {
            '#' => Cell::Wall,
            '.' => Cell::Free,
            'K' => Cell::Key,
            'D' => Cell::Door,
            'R' => Cell::Reward,
            'S' => Cell::Start,
            _ => return None,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("layout row {row}, column {col}: {message}")]
pub struct LayoutError {
    pub row: usize,
    pub col: usize,
    pub message: String,
}

/// Grid position as `(row, col)`.
pub type Pos = (usize, usize);

/// A rectangular grid read from text: one character per cell, `#` wall,
/// `.` free, `K` key, `D` door, `R` reward, `S` start. Border cells must be
/// walls and exactly one `S` is required.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    cells: Vec<Cell>,
    pub start: Pos,
}

impl Layout {
    pub fn parse(text: &str) -> Result<Self, LayoutError> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        let err = |row, col, message: &str| LayoutError {
            row,
            col,
            message: message.to_string(),
        };
        let height = rows.len();
        if height == 0 {
            return Err(err(0, 0, "empty layout"));
        }
        let width = rows[0].chars().count();
        let mut cells = Vec::with_capacity(width * height);
        let mut start = None;
        for (r, line) in rows.iter().enumerate() {
            let n = line.chars().count();
            if n != width {
                return Err(err(r, n.min(width), &format!("row has {n} cells, expected {width}")));
            }
            for (c, ch) in line.chars().enumerate() {
                let cell = Cell::from_char(ch)
                    .ok_or_else(|| err(r, c, &format!("unknown cell character {ch:?}")))?;
                let border = r == 0 || c == 0 || r + 1 == height || c + 1 == width;
                if border && cell != Cell::Wall {
                    return Err(err(r, c, "border cells must be walls"));
                }
                if cell == Cell::Start {
                    if start.is_some() {
                        return Err(err(r, c, "more than one start cell"));
                    }
                    start = Some((r, c));
                }
                cells.push(cell);
            }
        }
        let start = start.ok_or_else(|| err(0, 0, "no start cell"))?;
        Ok(Self {
            width,
            height,
            cells,
            start,
        })
    }

    pub fn cell(&self, (r, c): Pos) -> Cell {
        self.cells[r * self.width + c]
    }

    pub fn is_wall(&self, pos: Pos) -> bool {
        self.cell(pos) == Cell::Wall
    }

    /// Positions holding `kind`, in row-major order.
    pub fn find(&self, kind: Cell) -> Vec<Pos> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == kind)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn cells(&self) -> usize {
        self.cells.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_world() {
        let l = Layout::parse("###\n#S#\n###\n").unwrap();
        assert_eq!((l.width, l.height, l.start), (3, 3, (1, 1)));
        assert!(l.is_wall((0, 1)));
    }

    #[test]
    fn errors_name_row_and_column() {
        let e = Layout::parse("###\n#Sx\n###").unwrap_err();
        assert_eq!((e.row, e.col), (1, 2));
        let e = Layout::parse("###\n#S.\n###").unwrap_err();
        assert_eq!((e.row, e.col), (1, 2));
        assert!(e.to_string().contains("row 1, column 2"));
        let e = Layout::parse("####\n#S#\n###").unwrap_err();
        assert_eq!(e.row, 1);
        let e = Layout::parse("###\n#.#\n###").unwrap_err();
        assert!(e.message.contains("no start"));
        let e = Layout::parse("####\n#SS#\n####").unwrap_err();
        assert_eq!((e.row, e.col), (1, 2));
    }
}
