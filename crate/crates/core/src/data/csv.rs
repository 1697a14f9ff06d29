use std::io::Read;

use super::{byte_to_pixel, Dataset};
use crate::error::{Error, Result};
use crate::model::{Image, Shape};

/// Reads rows of `label,p0,p1,...` with `H·W·C` byte-valued pixels per row.
pub fn load_csv(source: impl Read, shape: Shape) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::Csv {
            line,
            message: e.to_string(),
        })?;
        if record.len() != shape.len() + 1 {
            return Err(Error::Csv {
                line,
                message: format!(
                    "expected {} fields (label + {} pixels), found {}",
                    shape.len() + 1,
                    shape.len(),
                    record.len()
                ),
            });
        }
        let parse = |field: &str| -> Result<u32> {
            field.parse::<u32>().map_err(|_| Error::Csv {
                line,
                message: format!("non-integer cell {field:?}"),
            })
        };
        labels.push(parse(&record[0])? as usize);
        let mut pixels = Vec::with_capacity(shape.len());
        for field in record.iter().skip(1) {
            let v = parse(field)?;
            let byte = u8::try_from(v).map_err(|_| Error::Csv {
                line,
                message: format!("pixel {v} outside 0-255"),
            })?;
            pixels.push(byte_to_pixel(byte));
        }
        images.push(Image::new(shape, pixels)?);
    }
    Dataset::new(shape, images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row() {
        let ds = load_csv("1,0,255,128,64\n".as_bytes(), Shape::new(2, 2, 1)).unwrap();
        assert_eq!(ds.labels(), &[1]);
        assert_eq!(ds.images()[0].pixels()[1], 1.0);
        assert!((ds.images()[0].pixels()[2] - 128.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn field_count_error() {
        let err = load_csv("1,0,255,128\n".as_bytes(), Shape::new(2, 2, 1)).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 1, .. }), "{err}");
    }

    #[test]
    fn bad_cells() {
        let shape = Shape::new(1, 2, 1);
        assert!(load_csv("0,1,x\n".as_bytes(), shape).is_err());
        assert!(load_csv("0,1,256\n".as_bytes(), shape).is_err());
        assert!(load_csv("0,1.5,2\n".as_bytes(), shape).is_err());
        let err = load_csv("0,1,2\n1,2,-3\n".as_bytes(), shape).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 2, .. }));
    }
}
