use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Editable surface → lemma map. Surfaces not listed are their own lemma.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LemmaTable {
    map: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct LemmaRow {
    surface: String,
    lemma: String,
}

const UNCHANGED: &[&str] = &[
    "always", "as", "bass", "bed", "bring", "building", "bus", "ceiling", "class", "during",
    "evening", "gas", "glass", "grass", "has", "is", "its", "king", "morning", "need", "news",
    "nothing", "red", "ring", "seed", "series", "shed", "sing", "something", "species", "speed",
    "spring", "string", "swing", "this", "thing", "us", "was", "wing", "yes",
];

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u')
}

/// Repair a stem left by stripping `-ing` / `-ed`.
fn fix_stem(stem: &str) -> String {
    let b = stem.as_bytes();
    let n = b.len();
    if n >= 2 && b[n - 1] == b[n - 2] && !is_vowel(b[n - 1]) && !matches!(b[n - 1], b'l' | b's' | b'z' | b'f')
    {
        return stem[..n - 1].to_string();
    }
    if matches!(b[n - 1], b'v' | b'c') || (n >= 2 && b[n - 1] == b'z' && b[n - 2] != b'z') {
        return format!("{stem}e");
    }
    stem.to_string()
}

/// Suffix-stripping lemma for one lowercase word.
pub(crate) fn suffix_lemma(word: &str) -> String {
    if word.len() <= 3 || !word.is_ascii() || UNCHANGED.contains(&word) {
        return word.to_string();
    }
    if let Some(stem) = word.strip_suffix("ies").filter(|s| s.len() >= 2) {
        return format!("{stem}y");
    }
    for suffix in ["sses", "shes", "ches", "xes", "zzes"] {
        if word.ends_with(suffix) {
            return word[..word.len() - 2].to_string();
        }
    }
    if word.ends_with("ss") || word.ends_with("us") || word.ends_with("is") {
        return word.to_string();
    }
    if let Some(stem) = word.strip_suffix('s') {
        return stem.to_string();
    }
    if let Some(stem) = word.strip_suffix("ing").filter(|s| s.len() >= 3) {
        return fix_stem(stem);
    }
    if let Some(stem) = word.strip_suffix("ied").filter(|s| s.len() >= 2) {
        return format!("{stem}y");
    }
    if let Some(stem) = word.strip_suffix("ed").filter(|s| s.len() >= 3) {
        return fix_stem(stem);
    }
    word.to_string()
}

impl LemmaTable {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            map: pairs.into_iter().collect(),
        }
    }

    /// Default table: every given word mapped by s/es/ing/ed stripping with an exception list.
    pub fn from_suffix_rules<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        Self::new(words.into_iter().filter_map(|w| {
            let w = w.as_ref().to_lowercase();
            let lemma = suffix_lemma(&w);
            (lemma != w).then_some((w, lemma))
        }))
    }

    pub fn lemma<'a>(&'a self, surface: &'a str) -> &'a str {
        self.map.get(surface).map_or(surface, String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(s, l)| (s.as_str(), l.as_str()))
    }

    pub fn from_reader<R: std::io::Read>(reader: R, path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut map = BTreeMap::new();
        for row in rdr.deserialize::<LemmaRow>() {
            let row = row.map_err(|source| Error::Csv {
                path: path.to_path_buf(),
                source,
            })?;
            map.insert(row.surface.trim().to_lowercase(), row.lemma.trim().to_lowercase());
        }
        Ok(Self { map })
    }

    /// Default table shipped with the crate (`data/lemmas.csv`).
    pub fn bundled() -> Self {
        Self::from_reader(
            include_str!("../../data/lemmas.csv").as_bytes(),
            Path::new("data/lemmas.csv"),
        )
        .expect("bundled lemma table parses")
    }

    /// Read a `surface,lemma` CSV. A missing file is a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Config(format!("lemma table {} unreadable: {e}", path.display()))
        })?;
        Self::from_reader(file, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["surface", "lemma"]).map_err(csv_err)?;
        for (s, l) in &self.map {
            w.write_record([s, l]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Lowercase candidate surfaces from a file name (extension dropped) and a raw keyword field.
///
/// Both are split on whitespace and punctuation; one-character and all-digit pieces are dropped.
pub fn meta_surfaces(file_name: &str, keywords_raw: &str) -> Vec<String> {
    let stem = Path::new(file_name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(file_name);
    [stem, keywords_raw]
        .iter()
        .flat_map(|field| field.split(|c: char| !c.is_alphanumeric()))
        .filter(|p| p.chars().count() > 1 && !p.chars().all(|c| c.is_ascii_digit()))
        .map(str::to_lowercase)
        .collect()
}

#[derive(Serialize, Deserialize)]
struct KeywordFile {
    lemmas: Vec<(String, u64)>,
    table: LemmaTable,
}

/// Lemma index over metadata-derived keywords.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordVocabulary {
    lemmas: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    table: LemmaTable,
}

impl KeywordVocabulary {
    /// Lemmas occurring more than `min_count` times across all metadata rows.
    pub fn build<'a>(
        rows: impl IntoIterator<Item = (&'a str, &'a str)>,
        table: LemmaTable,
        min_count: u64,
    ) -> Self {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for (file_name, raw) in rows {
            for s in meta_surfaces(file_name, raw) {
                *counts.entry(table.lemma(&s).to_string()).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, u64)> = counts.into_iter().filter(|&(_, c)| c > min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_parts(kept, table)
    }

    fn from_parts(kept: Vec<(String, u64)>, table: LemmaTable) -> Self {
        let (lemmas, counts): (Vec<String>, Vec<u64>) = kept.into_iter().unzip();
        let index = lemmas.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self {
            lemmas,
            counts,
            index,
            table,
        }
    }

    pub fn len(&self) -> usize {
        self.lemmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lemmas.is_empty()
    }

    pub fn lemma(&self, index: usize) -> &str {
        &self.lemmas[index]
    }

    pub fn count(&self, index: usize) -> u64 {
        self.counts[index]
    }

    pub fn table(&self) -> &LemmaTable {
        &self.table
    }

    pub fn lookup(&self, surface: &str) -> Option<usize> {
        self.index.get(self.table.lemma(surface)).copied()
    }

    /// Indices of the keyword lemmas among `tokens`, deduplicated.
    pub fn extract<S: AsRef<str>>(&self, tokens: &[S]) -> BTreeSet<usize> {
        tokens.iter().filter_map(|t| self.lookup(t.as_ref())).collect()
    }

    pub fn meta_keywords(&self, file_name: &str, keywords_raw: &str) -> BTreeSet<usize> {
        self.extract(&meta_surfaces(file_name, keywords_raw))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = KeywordFile {
            lemmas: self.lemmas.iter().cloned().zip(self.counts.iter().copied()).collect(),
            table: self.table.clone(),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: KeywordFile = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(Self::from_parts(file.lemmas, file.table))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_rules() {
        for (w, l) in [
            ("cars", "car"),
            ("birds", "bird"),
            ("bus", "bus"),
            ("flies", "fly"),
            ("chirping", "chirp"),
            ("singing", "sing"),
            ("sing", "sing"),
            ("running", "run"),
            ("driving", "drive"),
            ("buzzing", "buzz"),
            ("passes", "pass"),
            ("glass", "glass"),
            ("dropped", "drop"),
            ("fades", "fade"),
            ("repeats", "repeat"),
            ("car", "car"),
        ] {
            assert_eq!(suffix_lemma(w), l, "{w}");
        }
    }

    #[test]
    fn meta_surface_split() {
        assert_eq!(
            meta_surfaces("Birds_in park 02.wav", "birds;city-park;a;2019"),
            ["birds", "in", "park", "birds", "city", "park"]
        );
    }

    #[test]
    fn surfaces_collapse_to_one_lemma() {
        let table = LemmaTable::new([("cars".into(), "car".into()), ("car's".into(), "car".into())]);
        let rows = [("x.wav", "cars;car"), ("y.wav", "car")];
        let kv = KeywordVocabulary::build(rows.iter().map(|(a, b)| (*a, *b)), table, 0);
        assert_eq!(kv.len(), 1);
        assert_eq!(kv.lemma(0), "car");
        assert_eq!(kv.count(0), 3);
        assert_eq!(kv.lookup("car's"), Some(0));
    }

    #[test]
    fn threshold_is_strictly_greater() {
        let ten: Vec<(&str, &str)> = (0..10).map(|_| ("z.wav", "ten;eleven")).collect();
        let mut rows = ten.clone();
        rows.push(("z.wav", "eleven"));
        let kv = KeywordVocabulary::build(rows, LemmaTable::default(), 10);
        assert_eq!(kv.lookup("eleven"), Some(0));
        assert_eq!(kv.lookup("ten"), None);
    }

    #[test]
    fn missing_table_is_config_error() {
        let err = LemmaTable::load(Path::new("/nonexistent/lemmas.csv")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn persistence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let table = LemmaTable::from_suffix_rules(["cars", "birds", "car"]);
        let tp = dir.path().join("lemmas.csv");
        table.save(&tp).unwrap();
        assert_eq!(LemmaTable::load(&tp).unwrap(), table);
        let kv = KeywordVocabulary::build([("cars.wav", "birds;car")], table, 0);
        let kp = dir.path().join("keywords.json");
        kv.save(&kp).unwrap();
        assert_eq!(KeywordVocabulary::load(&kp).unwrap(), kv);
    }
}
