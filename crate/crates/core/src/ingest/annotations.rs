//! Detection-style box annotations and their conversion to counting points.

use std::io::{Read, Write};
use std::str::FromStr;

use crate::density::Point;
use crate::error::{Error, Result};

/// One `bb_left,bb_top,bb_width,bb_height,score,category,truncation,occlusion` line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBoxRecord {
    pub bb_left: f64,
    pub bb_top: f64,
    pub bb_width: f64,
    pub bb_height: f64,
    pub score: i64,
    pub category: i64,
    pub truncation: i64,
    pub occlusion: i64,
}

impl BBoxRecord {
    /// Average of box width and height.
    pub fn scale(&self) -> f64 {
        (self.bb_width + self.bb_height) / 2.0
    }
}

/// Which objects count, and where each is pinned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryGroup {
    /// Pedestrians and people, marked at the head (top center).
    People,
    /// Cars, vans, trucks and buses, marked at the box center.
    Vehicle,
}

impl CategoryGroup {
    pub fn categories(self) -> &'static [i64] {
        match self {
            CategoryGroup::People => &[0, 1],
            CategoryGroup::Vehicle => &[4, 5, 6, 9],
        }
    }

    pub fn includes(self, record: &BBoxRecord) -> bool {
        self.categories().contains(&record.category)
    }

    pub fn point_of(self, r: &BBoxRecord) -> Point {
        let col = r.bb_left + r.bb_width / 2.0;
        match self {
            CategoryGroup::People => Point::new(col, r.bb_top),
            CategoryGroup::Vehicle => Point::new(col, r.bb_top + r.bb_height / 2.0),
        }
    }

    /// Records of this group, in input order.
    pub fn select(self, records: &[BBoxRecord]) -> Vec<BBoxRecord> {
        records.iter().filter(|r| self.includes(r)).copied().collect()
    }

    /// One point per kept record, in input order.
    pub fn convert(self, records: &[BBoxRecord]) -> Vec<Point> {
        records
            .iter()
            .filter(|r| self.includes(r))
            .map(|r| self.point_of(r))
            .collect()
    }
}

impl FromStr for CategoryGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "people" => Ok(CategoryGroup::People),
            "vehicle" => Ok(CategoryGroup::Vehicle),
            other => Err(Error::Config(format!("unknown category group {other:?}"))),
        }
    }
}

pub fn convert_people(records: &[BBoxRecord]) -> Vec<Point> {
    CategoryGroup::People.convert(records)
}

pub fn convert_vehicle(records: &[BBoxRecord]) -> Vec<Point> {
    CategoryGroup::Vehicle.convert(records)
}

fn parse_field<T: FromStr>(field: &str, name: &str, line: u64) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {name} {field:?}"),
    })
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(r)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            line,
            msg: format!("{kind:?}"),
        },
    }
}

/// Reads box annotations; a trailing empty field is tolerated.
pub fn read_annotations<R: Read>(r: R) -> Result<Vec<BBoxRecord>> {
    let mut out = Vec::new();
    for row in reader(r).into_records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line());
        let mut fields: Vec<&str> = row.iter().collect();
        if fields.last() == Some(&"") {
            fields.pop();
        }
        if fields.len() != 8 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let real = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = parse_field(fields[i], name, line)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse { line, msg: format!("non-finite {name}") })
            }
        };
        let record = BBoxRecord {
            bb_left: real(0, "bb_left")?,
            bb_top: real(1, "bb_top")?,
            bb_width: real(2, "bb_width")?,
            bb_height: real(3, "bb_height")?,
            score: parse_field(fields[4], "score", line)?,
            category: parse_field(fields[5], "category", line)?,
            truncation: parse_field(fields[6], "truncation", line)?,
            occlusion: parse_field(fields[7], "occlusion", line)?,
        };
        if record.bb_width <= 0.0 || record.bb_height <= 0.0 {
            return Err(Error::Parse {
                line,
                msg: format!("box size must be positive, got {}x{}", record.bb_width, record.bb_height),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_annotations<W: Write>(mut w: W, records: &[BBoxRecord]) -> Result<()> {
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.bb_left, r.bb_top, r.bb_width, r.bb_height, r.score, r.category, r.truncation, r.occlusion
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `col,row` points file.
pub fn read_points<R: Read>(r: R) -> Result<Vec<Point>> {
    let mut out = Vec::new();
    for row in reader(r).into_records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected col,row, found {} fields", row.len()),
            });
        }
        let col: f64 = parse_field(&row[0], "col", line)?;
        let rw: f64 = parse_field(&row[1], "row", line)?;
        if !(col.is_finite() && rw.is_finite()) {
            return Err(Error::Parse { line, msg: "non-finite coordinate".into() });
        }
        out.push(Point::new(col, rw));
    }
    Ok(out)
}

/// Writes points as `col,row`, always with a decimal point.
pub fn write_points<W: Write>(mut w: W, points: &[Point]) -> Result<()> {
    for p in points {
        writeln!(w, "{:?},{:?}", p.col, p.row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(left: f64, top: f64, w: f64, h: f64, category: i64) -> BBoxRecord {
        BBoxRecord {
            bb_left: left,
            bb_top: top,
            bb_width: w,
            bb_height: h,
            score: 1,
            category,
            truncation: 0,
            occlusion: 0,
        }
    }

    #[test]
    fn people_use_head_point() {
        assert_eq!(convert_people(&[rec(10.0, 20.0, 6.0, 8.0, 0)]), vec![Point::new(13.0, 20.0)]);
        assert!(convert_people(&[rec(10.0, 20.0, 6.0, 8.0, 4)]).is_empty());
        assert!(convert_people(&[]).is_empty());
    }

    #[test]
    fn vehicles_use_box_center() {
        assert_eq!(convert_vehicle(&[rec(10.0, 20.0, 6.0, 8.0, 4)]), vec![Point::new(13.0, 24.0)]);
        assert!(convert_vehicle(&[rec(10.0, 20.0, 6.0, 8.0, 0)]).is_empty());
        assert_eq!(convert_vehicle(&[rec(0.0, 0.0, 1.0, 1.0, 9)]), vec![Point::new(0.5, 0.5)]);
    }

    #[test]
    fn conversion_keeps_order_and_count() {
        let recs: Vec<_> = (0..12).map(|i| rec(i as f64, 0.0, 2.0, 2.0, i % 11)).collect();
        let people = convert_people(&recs);
        let vehicles = convert_vehicle(&recs);
        assert_eq!(people.len(), 3);
        assert_eq!(vehicles.len(), 4);
        assert!(people.windows(2).all(|w| w[0].col < w[1].col));
    }

    #[test]
    fn parses_visdrone_lines() {
        let text = "684,8,273,116,0,0,0,0\n406,119,265,70,0,4,0,0,\n\n  10 , 20 , 6 , 8 , 1 , 1 , 0 , 2\n";
        let recs = read_annotations(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].category, 4);
        assert_eq!(recs[2], BBoxRecord { score: 1, category: 1, occlusion: 2, ..rec(10.0, 20.0, 6.0, 8.0, 1) });
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = read_annotations("1,2,3,4,0,0,0,0\n1,2,x,4,0,0,0,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = read_annotations("1,2,3,4,0,0,0,0\n1,2,3,4,0,0,0,0\n1,2,3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = read_annotations("1,2,0,4,0,0,0,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn points_round_trip() {
        let pts = vec![Point::new(13.0, 20.0), Point::new(0.5, 1e-3)];
        let mut buf = Vec::new();
        write_points(&mut buf, &pts).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "13.0,20.0\n0.5,0.001\n");
        assert_eq!(read_points(&buf[..]).unwrap(), pts);
    }

    #[test]
    fn annotations_round_trip() {
        let recs = vec![rec(1.5, 2.0, 3.0, 4.25, 5), rec(0.0, 0.0, 1.0, 1.0, 0)];
        let mut buf = Vec::new();
        write_annotations(&mut buf, &recs).unwrap();
        assert_eq!(read_annotations(&buf[..]).unwrap(), recs);
    }
}
