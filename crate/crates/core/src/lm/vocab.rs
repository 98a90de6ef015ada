use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LmError;
use crate::corpus::{Task, VOCAB};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Special {
    Bos,
    Eos,
    Sep,
    ImgStart,
    ImgEnd,
    Pad,
    TaskReport,
    TaskImage,
    TaskVqa,
}

pub const SPECIALS: [Special; 9] = [
    Special::Bos,
    Special::Eos,
    Special::Sep,
    Special::ImgStart,
    Special::ImgEnd,
    Special::Pad,
    Special::TaskReport,
    Special::TaskImage,
    Special::TaskVqa,
];

impl Special {
    pub fn marker(task: Task) -> Self {
        match task {
            Task::CxrToReport => Special::TaskReport,
            Task::ReportToCxr => Special::TaskImage,
            Task::Vqa => Special::TaskVqa,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Special::Bos => "<bos>",
            Special::Eos => "<eos>",
            Special::Sep => "<sep>",
            Special::ImgStart => "<img>",
            Special::ImgEnd => "</img>",
            Special::Pad => "<pad>",
            Special::TaskReport => "<task:cxr_to_report>",
            Special::TaskImage => "<task:report_to_cxr>",
            Special::TaskVqa => "<task:vqa>",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    Special,
}

/// Id layout: sorted words `[0, V_t)`, image codes `[V_t, V_t+K)`, then the
/// specials in the order given.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedVocab {
    words: Vec<String>,
    codebook_size: usize,
    specials: Vec<Special>,
    #[serde(skip)]
    word_ids: BTreeMap<String, usize>,
}

pub fn build_vocab(words: &[&str], codebook_size: usize, specials: &[Special]) -> Result<UnifiedVocab, LmError> {
    if words.is_empty() {
        return Err(LmError::Vocab("text vocabulary is empty".into()));
    }
    if codebook_size == 0 {
        return Err(LmError::Vocab("codebook size must be positive".into()));
    }
    let mut sorted: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(LmError::Vocab(format!("duplicate word {:?}", w[0])));
    }
    let mut seen = specials.to_vec();
    seen.sort();
    seen.dedup();
    if seen.len() != specials.len() {
        return Err(LmError::Vocab("duplicate special token".into()));
    }
    let word_ids = sorted.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    Ok(UnifiedVocab { words: sorted, codebook_size, specials: specials.to_vec(), word_ids })
}

/// Grammar words, `codebook_size` image codes and all nine specials.
pub fn default_vocab(codebook_size: usize) -> Result<UnifiedVocab, LmError> {
    build_vocab(&VOCAB, codebook_size, &SPECIALS)
}

impl UnifiedVocab {
    pub fn len(&self) -> usize {
        self.words.len() + self.codebook_size + self.specials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_len(&self) -> usize {
        self.words.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.word_ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn image_id(&self, code: usize) -> usize {
        self.words.len() + code
    }

    /// Codebook index of an image id.
    pub fn code_of(&self, id: usize) -> Option<usize> {
        (self.modality(id)? == Modality::Image).then(|| id - self.words.len())
    }

    pub fn special(&self, s: Special) -> usize {
        let pos = self.specials.iter().position(|&x| x == s).expect("special not in vocabulary");
        self.words.len() + self.codebook_size + pos
    }

    pub fn has_special(&self, s: Special) -> bool {
        self.specials.contains(&s)
    }

    pub fn special_of(&self, id: usize) -> Option<Special> {
        let base = self.words.len() + self.codebook_size;
        id.checked_sub(base).and_then(|i| self.specials.get(i).copied())
    }

    pub fn modality(&self, id: usize) -> Option<Modality> {
        let (t, k) = (self.words.len(), self.codebook_size);
        if id < t {
            Some(Modality::Text)
        } else if id < t + k {
            Some(Modality::Image)
        } else if id < self.len() {
            Some(Modality::Special)
        } else {
            None
        }
    }

    /// Maps words to ids; the error lists every unknown word.
    pub fn encode_words(&self, words: &[String]) -> Result<Vec<usize>, LmError> {
        let unknown: Vec<&str> = words.iter().filter(|w| self.word_id(w).is_none()).map(String::as_str).collect();
        if !unknown.is_empty() {
            return Err(LmError::Vocab(format!("unknown words {unknown:?}")));
        }
        Ok(words.iter().map(|w| self.word_ids[w.as_str()]).collect())
    }

    /// Words for the text ids in `ids`; other ids are skipped.
    pub fn decode_words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().filter_map(|&i| self.word(i)).map(str::to_string).collect()
    }

    /// Printable form of any id.
    pub fn symbol(&self, id: usize) -> String {
        match self.modality(id) {
            Some(Modality::Text) => self.words[id].clone(),
            Some(Modality::Image) => format!("<z{}>", id - self.words.len()),
            Some(Modality::Special) => self.special_of(id).map(Special::symbol).unwrap_or("?").to_string(),
            None => format!("<unk:{id}>"),
        }
    }

    /// One `id\tsymbol` line per entry.
    pub fn table(&self) -> String {
        (0..self.len()).map(|i| format!("{i}\t{}\n", self.symbol(i))).collect()
    }

    /// Restores the lookup index after deserialisation.
    pub fn reindex(&mut self) {
        self.word_ids = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }
}
