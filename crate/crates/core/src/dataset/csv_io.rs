//! CSV layout of the public task release: a data file with a header row and
//! an answers file of `id,label` rows (header optional).

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::path::Path;

use csv::{ReaderBuilder, StringRecord, WriterBuilder};

use super::{ExplanationExample, ValidationExample};
use crate::error::{Error, Result};

const OPTION_LETTERS: [&str; 3] = ["A", "B", "C"];

fn normalize(name: &str) -> String {
    name.trim()
        .trim_start_matches('\u{feff}')
        .to_ascii_lowercase()
        .replace(['_', ' '], "")
}

fn open_reader(path: &Path, has_headers: bool) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(ReaderBuilder::new()
        .has_headers(has_headers)
        .flexible(true)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn column_indices(path: &Path, headers: &StringRecord, wanted: &[&str]) -> Result<Vec<usize>> {
    let names: Vec<String> = headers.iter().map(normalize).collect();
    wanted
        .iter()
        .map(|w| {
            names.iter().position(|n| n == w).ok_or_else(|| {
                Error::Format(format!(
                    "{}: missing column {w:?} (found {:?})",
                    path.display(),
                    headers.iter().collect::<Vec<_>>()
                ))
            })
        })
        .collect()
}

/// Reads a data file into `(id, fields)` rows in file order.
fn read_rows(path: &Path, columns: &[&str]) -> Result<Vec<(String, Vec<String>)>> {
    let mut reader = open_reader(path, true)?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let mut wanted = vec!["id"];
    wanted.extend_from_slice(columns);
    let idx = column_indices(path, &headers, &wanted)?;

    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| record.get(idx[i]).unwrap_or("").to_string();
        let id = field(0).trim().to_string();
        if id.is_empty() {
            return Err(Error::Format(format!("{}: row with empty id", path.display())));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Format(format!(
                "{}: duplicate id {id:?}",
                path.display()
            )));
        }
        let fields: Vec<String> = (1..wanted.len()).map(field).collect();
        if record.len() < headers.len() {
            return Err(Error::Format(format!(
                "{}: id {id:?} has {} fields, expected {}",
                path.display(),
                record.len(),
                headers.len()
            )));
        }
        rows.push((id, fields));
    }
    Ok(rows)
}

/// Reads `id,label` rows. A leading `id,label` header row is skipped.
fn read_answers(path: &Path) -> Result<HashMap<String, String>> {
    let mut reader = open_reader(path, false)?;
    let mut answers = HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != 2 {
            return Err(Error::Format(format!(
                "{}: answer row {} has {} fields, expected 2",
                path.display(),
                line + 1,
                record.len()
            )));
        }
        let id = record[0].trim().to_string();
        let label = record[1].trim().to_string();
        if line == 0 && normalize(&id) == "id" {
            continue;
        }
        if answers.insert(id.clone(), label).is_some() {
            return Err(Error::Format(format!(
                "{}: duplicate answer for id {id:?}",
                path.display()
            )));
        }
    }
    Ok(answers)
}

/// Pairs every data row with its answer; extra or missing answers are errors.
fn join_answers(
    data_path: &Path,
    answers_path: &Path,
    rows: &[(String, Vec<String>)],
    mut answers: HashMap<String, String>,
) -> Result<Vec<String>> {
    let mut labels = Vec::with_capacity(rows.len());
    for (id, _) in rows {
        let label = answers.remove(id).ok_or_else(|| {
            Error::Format(format!(
                "{}: no answer for id {id:?}",
                answers_path.display()
            ))
        })?;
        labels.push(label);
    }
    if let Some(extra) = answers.keys().min() {
        return Err(Error::Format(format!(
            "{}: answer for id {extra:?} not present in {}",
            answers_path.display(),
            data_path.display()
        )));
    }
    Ok(labels)
}

fn non_empty(path: &Path, id: &str, column: &str, value: String) -> Result<String> {
    if value.trim().is_empty() {
        return Err(Error::Format(format!(
            "{}: id {id:?} has an empty {column}",
            path.display()
        )));
    }
    Ok(value)
}

/// Reads a validation data file without answers; every label is 0.
pub fn read_validation_data(data_path: &Path) -> Result<Vec<ValidationExample>> {
    read_rows(data_path, &["sent0", "sent1"])?
        .into_iter()
        .map(|(id, f)| {
            let mut f = f.into_iter();
            let sent0 = non_empty(data_path, &id, "sent0", f.next().unwrap_or_default())?;
            let sent1 = non_empty(data_path, &id, "sent1", f.next().unwrap_or_default())?;
            Ok(ValidationExample {
                id,
                sent0,
                sent1,
                label: 0,
            })
        })
        .collect()
}

pub fn load_validation_csv(data_path: &Path, answers_path: &Path) -> Result<Vec<ValidationExample>> {
    let mut examples = read_validation_data(data_path)?;
    let rows: Vec<(String, Vec<String>)> =
        examples.iter().map(|e| (e.id.clone(), Vec::new())).collect();
    let labels = join_answers(data_path, answers_path, &rows, read_answers(answers_path)?)?;
    for (ex, label) in examples.iter_mut().zip(labels) {
        ex.label = match label.as_str() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Format(format!(
                    "{}: id {:?} has label {other:?}, expected 0 or 1",
                    answers_path.display(),
                    ex.id
                )))
            }
        };
    }
    Ok(examples)
}

/// Reads an explanation data file without answers; every label is 0.
pub fn read_explanation_data(data_path: &Path) -> Result<Vec<ExplanationExample>> {
    let columns = ["falsesent", "optiona", "optionb", "optionc"];
    read_rows(data_path, &columns)?
        .into_iter()
        .map(|(id, f)| {
            let mut it = f.into_iter().zip(columns);
            let mut next = || {
                let (v, c) = it.next().expect("four requested columns");
                non_empty(data_path, &id, c, v)
            };
            let false_sent = next()?;
            let options = [next()?, next()?, next()?];
            Ok(ExplanationExample {
                id: id.clone(),
                false_sent,
                options,
                label: 0,
            })
        })
        .collect()
}

pub fn load_explanation_csv(
    data_path: &Path,
    answers_path: &Path,
) -> Result<Vec<ExplanationExample>> {
    let mut examples = read_explanation_data(data_path)?;
    let rows: Vec<(String, Vec<String>)> =
        examples.iter().map(|e| (e.id.clone(), Vec::new())).collect();
    let labels = join_answers(data_path, answers_path, &rows, read_answers(answers_path)?)?;
    for (ex, label) in examples.iter_mut().zip(labels) {
        ex.label = OPTION_LETTERS
            .iter()
            .position(|l| l.eq_ignore_ascii_case(&label))
            .ok_or_else(|| {
                Error::Format(format!(
                    "{}: id {:?} has label {label:?}, expected A, B or C",
                    answers_path.display(),
                    ex.id
                ))
            })?;
    }
    Ok(examples)
}

fn write_records(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = WriterBuilder::new().from_writer(file);
    let werr = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(werr)?;
    for r in rows {
        w.write_record(&r).map_err(werr)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_validation_csv(
    examples: &[ValidationExample],
    data_path: &Path,
    answers_path: &Path,
) -> Result<()> {
    write_records(
        data_path,
        &["id", "sent0", "sent1"],
        examples
            .iter()
            .map(|e| vec![e.id.clone(), e.sent0.clone(), e.sent1.clone()])
            .collect(),
    )?;
    write_records(
        answers_path,
        &["id", "label"],
        examples
            .iter()
            .map(|e| vec![e.id.clone(), e.label.to_string()])
            .collect(),
    )
}

pub fn write_explanation_csv(
    examples: &[ExplanationExample],
    data_path: &Path,
    answers_path: &Path,
) -> Result<()> {
    write_records(
        data_path,
        &["id", "FalseSent", "OptionA", "OptionB", "OptionC"],
        examples
            .iter()
            .map(|e| {
                let mut r = vec![e.id.clone(), e.false_sent.clone()];
                r.extend(e.options.iter().cloned());
                r
            })
            .collect(),
    )?;
    write_records(
        answers_path,
        &["id", "label"],
        examples
            .iter()
            .map(|e| vec![e.id.clone(), OPTION_LETTERS[e.label].to_string()])
            .collect(),
    )
}

/// `id,predicted_label` rows. Explanation predictions are written as option
/// letters, validation predictions as 0/1.
pub fn write_predictions_csv(path: &Path, rows: &[(String, String)]) -> Result<()> {
    write_records(
        path,
        &["id", "predicted_label"],
        rows.iter().map(|(id, l)| vec![id.clone(), l.clone()]).collect(),
    )
}

pub fn option_letter(index: usize) -> &'static str {
    OPTION_LETTERS[index]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_well_formed_validation_pair() {
        let dir = tempfile::tempdir().unwrap();
        let data = write(
            dir.path(),
            "d.csv",
            "id,sent0,sent1\n1,He drinks milk.,\"He drinks a car, slowly.\"\n2,a b,c d\n",
        );
        let ans = write(dir.path(), "a.csv", "1,1\n2,0\n");
        let ex = load_validation_csv(&data, &ans).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].id, "1");
        assert_eq!(ex[0].sent1, "He drinks a car, slowly.");
        assert_eq!(ex[0].label, 1);
        assert_eq!(ex[1].label, 0);
    }

    #[test]
    fn missing_answer_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let data = write(dir.path(), "d.csv", "id,sent0,sent1\n1,a,b\n42,c,d\n");
        let ans = write(dir.path(), "a.csv", "id,label\n1,0\n");
        let err = load_validation_csv(&data, &ans).unwrap_err().to_string();
        assert!(err.contains("\"42\""), "{err}");
    }

    #[test]
    fn duplicate_and_bad_labels_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let data = write(dir.path(), "d.csv", "id,sent0,sent1\n1,a,b\n1,c,d\n");
        let ans = write(dir.path(), "a.csv", "1,0\n");
        let err = load_validation_csv(&data, &ans).unwrap_err().to_string();
        assert!(err.contains("duplicate id \"1\""), "{err}");

        let data = write(dir.path(), "d2.csv", "id,sent0,sent1\n1,a,b\n");
        let ans = write(dir.path(), "a2.csv", "1,2\n");
        assert!(matches!(
            load_validation_csv(&data, &ans),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn explanation_letters_map_to_indices() {
        let dir = tempfile::tempdir().unwrap();
        let data = write(
            dir.path(),
            "d.csv",
            "id,FalseSent,OptionA,OptionB,OptionC\n5,x,o1,o2,o3\n",
        );
        let ans = write(dir.path(), "a.csv", "5,B\n");
        let ex = load_explanation_csv(&data, &ans).unwrap();
        assert_eq!(ex[0].label, 1);
        assert_eq!(ex[0].options[2], "o3");

        let bad = write(dir.path(), "b.csv", "5,D\n");
        assert!(matches!(
            load_explanation_csv(&data, &bad),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn explanation_wrong_option_count() {
        let dir = tempfile::tempdir().unwrap();
        let data = write(dir.path(), "d.csv", "id,FalseSent,OptionA,OptionB\n5,x,o1,o2\n");
        let ans = write(dir.path(), "a.csv", "5,A\n");
        assert!(matches!(
            load_explanation_csv(&data, &ans),
            Err(Error::Format(_))
        ));
        let data = write(
            dir.path(),
            "d2.csv",
            "id,FalseSent,OptionA,OptionB,OptionC\n5,x,o1,o2\n",
        );
        assert!(matches!(
            load_explanation_csv(&data, &ans),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_validation_csv(Path::new("/no/such/data.csv"), Path::new("/no/a.csv"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("/no/such/data.csv"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn writers_and_loaders_are_lossless(
            rows in prop::collection::vec(
                ("[a-zA-Z ,\"']{1,20}", "[a-zA-Z ,\"']{1,20}", 0usize..2, "[a-z ,]{1,12}", 0usize..3),
                1..8,
            )
        ) {
            let rows: Vec<_> = rows
                .into_iter()
                .filter(|r| !r.0.trim().is_empty() && !r.1.trim().is_empty() && !r.3.trim().is_empty())
                .collect();
            prop_assume!(!rows.is_empty());
            let dir = tempfile::tempdir().unwrap();
            let val: Vec<ValidationExample> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| ValidationExample { id: i.to_string(), sent0: r.0.clone(), sent1: r.1.clone(), label: r.2 })
                .collect();
            let (d, a) = (dir.path().join("d.csv"), dir.path().join("a.csv"));
            write_validation_csv(&val, &d, &a).unwrap();
            prop_assert_eq!(load_validation_csv(&d, &a).unwrap(), val);

            let expl: Vec<ExplanationExample> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| ExplanationExample {
                    id: format!("e{i}"),
                    false_sent: r.0.clone(),
                    options: [r.1.clone(), r.3.clone(), r.0.clone()],
                    label: r.4,
                })
                .collect();
            write_explanation_csv(&expl, &d, &a).unwrap();
            prop_assert_eq!(load_explanation_csv(&d, &a).unwrap(), expl);
        }
    }
}
