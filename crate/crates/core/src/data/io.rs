use std::io::{Read, Write};
use std::path::Path;

use super::{
    combine_sensitive, AttributeKind, AttributeSpec, Column, DataError, Dataset, Role,
};

/// Reads an RFC-4180 CSV whose header must name exactly the schema attributes.
///
/// Line numbers in errors are 1-based file lines (the header is line 1).
/// When the schema marks several attributes as sensitive they are merged with
/// [`combine_sensitive`]; a single sensitive attribute keeps its declared
/// category order, so its first category is the privileged group.
pub fn load_csv(path: &Path, schema: &[AttributeSpec]) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, schema)
}

pub fn load_csv_reader<R: Read>(reader: R, schema: &[AttributeSpec]) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let header: Vec<String> = header.into_iter().filter(|h| !h.is_empty()).collect();

    let mut positions = Vec::with_capacity(schema.len());
    for spec in schema {
        let pos = header
            .iter()
            .position(|h| *h == spec.name)
            .ok_or_else(|| DataError::MissingColumn {
                column: spec.name.clone(),
            })?;
        positions.push(pos);
    }
    if let Some(extra) = header.iter().find(|h| !schema.iter().any(|s| &s.name == *h)) {
        return Err(DataError::UnexpectedColumn {
            column: extra.clone(),
        });
    }

    let mut columns: Vec<Column> = schema
        .iter()
        .map(|s| match s.kind {
            AttributeKind::Numeric => Column::Numeric(Vec::new()),
            AttributeKind::Categorical => Column::Categorical(Vec::new()),
        })
        .collect();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            return Err(DataError::RaggedRow {
                line,
                expected: header.len(),
                found: record.len(),
            });
        }
        for ((spec, &pos), col) in schema.iter().zip(&positions).zip(columns.iter_mut()) {
            let raw = record[pos].trim();
            if raw.is_empty() || raw == "?" {
                return Err(DataError::MissingValue {
                    line,
                    column: spec.name.clone(),
                });
            }
            match col {
                Column::Numeric(v) => {
                    let x: f64 = raw.parse().map_err(|_| DataError::NonNumericValue {
                        line,
                        column: spec.name.clone(),
                        value: raw.to_string(),
                    })?;
                    if !x.is_finite() {
                        return Err(DataError::NonNumericValue {
                            line,
                            column: spec.name.clone(),
                            value: raw.to_string(),
                        });
                    }
                    v.push(x);
                }
                Column::Categorical(v) => {
                    let code =
                        spec.category_index(raw)
                            .ok_or_else(|| DataError::UnknownCategory {
                                line,
                                column: spec.name.clone(),
                                value: raw.to_string(),
                            })?;
                    v.push(code);
                }
            }
        }
    }
    if columns[0].is_empty() {
        return Err(DataError::InvalidArgument("CSV holds no records".into()));
    }

    let sensitive: Vec<&str> = schema
        .iter()
        .filter(|s| s.role == Role::Sensitive)
        .map(|s| s.name.as_str())
        .collect();
    if sensitive.len() > 1 {
        // Build with the first sensitive attribute, then merge all of them.
        let mut staged = schema.to_vec();
        let mut seen = false;
        for s in staged.iter_mut() {
            if s.role == Role::Sensitive {
                if seen {
                    s.role = Role::Other;
                }
                seen = true;
            }
        }
        let ds = Dataset::new(staged, columns)?;
        Ok(combine_sensitive(&ds, &sensitive)?.dataset)
    } else {
        Dataset::new(schema.to_vec(), columns)
    }
}

pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    write_csv_writer(dataset, file)
}

/// Writes the dataset with its header in schema order. Numbers use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv_writer<W: Write>(dataset: &Dataset, writer: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(dataset.schema().iter().map(|s| s.name.as_str()))?;
    let mut row: Vec<String> = Vec::with_capacity(dataset.schema().len());
    for r in 0..dataset.len() {
        row.clear();
        for (spec, col) in dataset.schema().iter().zip(dataset.columns()) {
            row.push(match col {
                Column::Numeric(v) => format!("{}", v[r]),
                Column::Categorical(v) => spec.categories[v[r]].clone(),
            });
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Vec<AttributeSpec> {
        vec![
            AttributeSpec::numeric("age"),
            AttributeSpec::categorical("sex", &["Male", "Female"]).with_role(Role::Sensitive),
            AttributeSpec::categorical("income", &["<=50K", ">50K"]).with_role(Role::Decision),
        ]
    }

    #[test]
    fn parses_and_round_trips() {
        let text = "age,sex,income\n39,Male,<=50K\n50.5,Female,>50K\n28,Female,<=50K\n";
        let ds = load_csv_reader(text.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.k(), 2);
        assert_eq!(ds.groups(), &[0, 1, 1]);
        assert_eq!(ds.decisions(), vec![false, true, false]);
        let mut buf = Vec::new();
        write_csv_writer(&ds, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), text);
        let again = load_csv_reader(buf.as_slice(), &schema()).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn empty_file_is_missing_column() {
        let err = load_csv_reader("".as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn { ref column } if column == "age"));
    }

    #[test]
    fn errors_name_line_and_column() {
        let err = load_csv_reader("age,sex,income\n39,Male,<=50K\n4x,Male,>50K\n".as_bytes(), &schema())
            .unwrap_err();
        match err {
            DataError::NonNumericValue { line, column, value } => {
                assert_eq!((line, column.as_str(), value.as_str()), (3, "age", "4x"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = load_csv_reader("age,sex,income\n39,Other,<=50K\n".as_bytes(), &schema())
            .unwrap_err();
        assert!(matches!(err, DataError::UnknownCategory { line: 2, .. }));
        let err = load_csv_reader("age,sex,income,zip\n39,Male,<=50K,1\n".as_bytes(), &schema())
            .unwrap_err();
        assert!(matches!(err, DataError::UnexpectedColumn { ref column } if column == "zip"));
        let err = load_csv_reader("age,sex,income\n,Male,<=50K\n".as_bytes(), &schema())
            .unwrap_err();
        assert!(matches!(err, DataError::MissingValue { line: 2, .. }));
    }

    #[test]
    fn multiple_sensitive_attributes_are_combined() {
        let schema = vec![
            AttributeSpec::categorical("sex", &["Male", "Female"]).with_role(Role::Sensitive),
            AttributeSpec::categorical("race", &["White", "NonWhite"]).with_role(Role::Sensitive),
            AttributeSpec::categorical("y", &["0", "1"]).with_role(Role::Decision),
        ];
        let text = "sex,race,y\nMale,White,1\nMale,NonWhite,0\nFemale,White,0\nFemale,NonWhite,0\nMale,White,1\n";
        let ds = load_csv_reader(text.as_bytes(), &schema).unwrap();
        assert_eq!(ds.k(), 4);
        assert_eq!(ds.group_labels()[0], "Male-White");
        assert_eq!(ds.schema()[0].name, "group");
    }
}
