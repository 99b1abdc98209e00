use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{TextCorpus, TextExample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            other => Err(Error::Unknown { kind: "corpus format", name: other.into() }),
        }
    }
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(CorpusFormat::Jsonl),
            "tsv" => Some(CorpusFormat::Tsv),
            _ => None,
        }
    }
}

#[derive(Clone, Copy)]
enum Split {
    Train,
    Dev,
    Test,
}

struct Record {
    text: String,
    label: String,
    split: Split,
}

fn parse_split(s: &str) -> Option<Split> {
    match s {
        "train" => Some(Split::Train),
        "dev" | "valid" | "validation" => Some(Split::Dev),
        "test" => Some(Split::Test),
        _ => None,
    }
}

/// Reads `{text, label, split}` records. Labels (strings or integers) are
/// remapped to `0..K` in first-seen order.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<TextCorpus> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let records = match format {
        CorpusFormat::Jsonl => parse_jsonl(&raw, &err)?,
        CorpusFormat::Tsv => parse_tsv(&raw, &err)?,
    };
    if records.is_empty() {
        return Err(Error::EmptyCorpus(format!("{} has no records", path.display())));
    }

    let mut label_names: Vec<String> = Vec::new();
    let mut corpus = TextCorpus { train: vec![], dev: vec![], test: vec![], label_names: vec![], provenance: path.display().to_string() };
    for r in records {
        let label = match label_names.iter().position(|l| *l == r.label) {
            Some(i) => i,
            None => {
                label_names.push(r.label);
                label_names.len() - 1
            }
        };
        let ex = TextExample { text: r.text, label };
        match r.split {
            Split::Train => corpus.train.push(ex),
            Split::Dev => corpus.dev.push(ex),
            Split::Test => corpus.test.push(ex),
        }
    }
    corpus.label_names = label_names;
    Ok(corpus)
}

fn parse_jsonl(raw: &str, err: &dyn Fn(usize, String) -> Error) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| err(lineno, e.to_string()))?;
        let field = |name: &str| v.get(name).ok_or_else(|| err(lineno, format!("missing field `{name}`")));
        let text = field("text")?.as_str().ok_or_else(|| err(lineno, "`text` must be a string".into()))?.to_string();
        let label = match field("label")? {
            Value::String(s) => s.clone(),
            Value::Number(n) if n.is_u64() || n.is_i64() => n.to_string(),
            other => return Err(err(lineno, format!("label {other} cannot be remapped to a class index"))),
        };
        let split_s = field("split")?.as_str().ok_or_else(|| err(lineno, "`split` must be a string".into()))?;
        let split = parse_split(split_s).ok_or_else(|| err(lineno, format!("unknown split `{split_s}`")))?;
        out.push(Record { text, label, split });
    }
    Ok(out)
}

fn parse_tsv(raw: &str, err: &dyn Fn(usize, String) -> Error) -> Result<Vec<Record>> {
    let mut lines = raw.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    let col = |name: &str| cols.iter().position(|c| *c == name).ok_or_else(|| err(1, format!("missing field `{name}`")));
    let (ti, li, si) = (col("text")?, col("label")?, col("split")?);
    let mut out = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        let get = |idx: usize, name: &str| cells.get(idx).copied().ok_or_else(|| err(lineno, format!("missing field `{name}`")));
        let text = get(ti, "text")?.to_string();
        let label = get(li, "label")?.trim().to_string();
        if label.is_empty() {
            return Err(err(lineno, "empty label".into()));
        }
        let split_s = get(si, "split")?.trim();
        let split = parse_split(split_s).ok_or_else(|| err(lineno, format!("unknown split `{split_s}`")))?;
        out.push(Record { text, label, split });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn jsonl_labels_first_seen_order() {
        let f = write_tmp(
            "{\"text\":\"good film\",\"label\":\"pos\",\"split\":\"train\"}\n\
             {\"text\":\"bad film\",\"label\":\"neg\",\"split\":\"train\"}\n\
             {\"text\":\"fine\",\"label\":\"pos\",\"split\":\"test\"}\n",
            ".jsonl",
        );
        let c = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(c.num_classes(), 2);
        assert_eq!(c.label_names, vec!["pos", "neg"]);
        assert_eq!(c.train.iter().map(|e| e.label).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(c.test[0].label, 0);
    }

    #[test]
    fn tsv_matches_jsonl() {
        let j = write_tmp(
            "{\"text\":\"good film\",\"label\":\"pos\",\"split\":\"train\"}\n\
             {\"text\":\"bad film\",\"label\":\"neg\",\"split\":\"dev\"}\n",
            ".jsonl",
        );
        let t = write_tmp("split\ttext\tlabel\ntrain\tgood film\tpos\ndev\tbad film\tneg\n", ".tsv");
        let mut a = load_corpus(j.path(), CorpusFormat::Jsonl).unwrap();
        let mut b = load_corpus(t.path(), CorpusFormat::Tsv).unwrap();
        a.provenance.clear();
        b.provenance.clear();
        assert_eq!(a, b);
    }

    #[test]
    fn integer_labels_accepted() {
        let f = write_tmp("{\"text\":\"x\",\"label\":7,\"split\":\"train\"}\n", ".jsonl");
        let c = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(c.label_names, vec!["7"]);
    }

    #[test]
    fn errors_are_descriptive() {
        let f = write_tmp("{\"text\":\"x\",\"label\":\"a\",\"split\":\"holdout\"}\n", ".jsonl");
        let e = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap_err().to_string();
        assert!(e.contains("unknown split `holdout`") && e.contains(":1:"), "{e}");

        let f = write_tmp("{\"text\":\"x\",\"split\":\"train\"}\n", ".jsonl");
        let e = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap_err().to_string();
        assert!(e.contains("missing field `label`"), "{e}");

        let f = write_tmp("{\"text\":\"x\",\"label\":1.5,\"split\":\"train\"}\n", ".jsonl");
        let e = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap_err().to_string();
        assert!(e.contains("cannot be remapped"), "{e}");

        let f = write_tmp("text\tlabel\nx\ta\n", ".tsv");
        let e = load_corpus(f.path(), CorpusFormat::Tsv).unwrap_err().to_string();
        assert!(e.contains("missing field `split`"), "{e}");
    }

    #[test]
    fn dev_only_file_has_empty_train() {
        let f = write_tmp("{\"text\":\"x\",\"label\":\"a\",\"split\":\"dev\"}\n", ".jsonl");
        let c = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap();
        assert!(c.train.is_empty());
        let v = crate::data::build_vocab(&["x"], 1).unwrap();
        assert!(matches!(c.tokenize(&v, 8).require_train(), Err(Error::EmptyCorpus(_))));
    }
}
