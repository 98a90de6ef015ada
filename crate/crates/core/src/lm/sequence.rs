use serde::{Deserialize, Serialize};

use super::vocab::{Modality, Special, UnifiedVocab};
use super::LmError;
use crate::corpus::{InstructionTemplate, Task};

/// Token ids with per-position modality tags. `condition_mask[i]` is true
/// when position `i` is conditioning and never a prediction target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub modality: Vec<Modality>,
    pub condition_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions `j ≥ 1` whose token is predicted from the prefix before it.
    pub fn loss_positions(&self) -> Vec<usize> {
        (1..self.len()).filter(|&j| !self.condition_mask[j]).collect()
    }

    /// Checks tags against id ranges and the image-span shape.
    pub fn validate(&self, vocab: &UnifiedVocab, image_len: usize) -> Result<(), LmError> {
        if self.modality.len() != self.ids.len() || self.condition_mask.len() != self.ids.len() {
            return Err(LmError::Layout("ids, tags and mask differ in length".into()));
        }
        let (start, end) = (vocab.special(Special::ImgStart), vocab.special(Special::ImgEnd));
        let mut in_span: Option<usize> = None;
        for (i, (&id, &tag)) in self.ids.iter().zip(&self.modality).enumerate() {
            if vocab.modality(id) != Some(tag) {
                return Err(LmError::Layout(format!("position {i}: id {id} tagged {tag:?}")));
            }
            match (in_span, tag) {
                (None, _) if id == start => in_span = Some(0),
                (Some(n), Modality::Image) => in_span = Some(n + 1),
                (Some(n), _) if id == end => {
                    if n != image_len {
                        return Err(LmError::Layout(format!("image span of {n} tokens, expected {image_len}")));
                    }
                    in_span = None;
                }
                (None, Modality::Image) => return Err(LmError::Layout(format!("image id outside a span at {i}"))),
                (Some(_), _) => return Err(LmError::Layout(format!("non-image id inside a span at {i}"))),
                _ => {}
            }
        }
        Ok(())
    }
}

/// How a sequence is prompted.
#[derive(Clone, Debug, PartialEq)]
pub enum Prompting {
    /// Task marker followed by the instruction words.
    Instructed(InstructionTemplate),
    /// The same positions filled with PAD (the no-instructions ablation).
    Padded(InstructionTemplate),
    /// No marker at all: the paired pretraining layouts of stage 1.
    Bare,
}

/// Content for [`assemble_sequence`]. Words are grammar tokens, `image` is
/// raster-order codebook indices.
#[derive(Clone, Copy, Debug, Default)]
pub struct SequenceParts<'a> {
    pub image: Option<&'a [usize]>,
    /// Report for the two report tasks, answer for VQA.
    pub text: Option<&'a [String]>,
    pub question: Option<&'a [String]>,
}

struct Builder<'v> {
    vocab: &'v UnifiedVocab,
    seq: TokenSequence,
}

impl Builder<'_> {
    fn push(&mut self, id: usize, cond: bool) {
        self.seq.ids.push(id);
        self.seq.modality.push(self.vocab.modality(id).expect("id from vocab"));
        self.seq.condition_mask.push(cond);
    }

    fn special(&mut self, s: Special, cond: bool) {
        self.push(self.vocab.special(s), cond);
    }

    fn words(&mut self, words: &[String], cond: bool) -> Result<(), LmError> {
        for id in self.vocab.encode_words(words)? {
            self.push(id, cond);
        }
        Ok(())
    }

    fn image(&mut self, codes: &[usize], cond: bool) -> Result<(), LmError> {
        if let Some(&bad) = codes.iter().find(|&&k| k >= self.vocab.codebook_size()) {
            return Err(LmError::Layout(format!("image code {bad} ≥ codebook size {}", self.vocab.codebook_size())));
        }
        self.special(Special::ImgStart, cond);
        for &k in codes {
            self.push(self.vocab.image_id(k), cond);
        }
        self.special(Special::ImgEnd, cond);
        Ok(())
    }

    fn prompt(&mut self, task: Task, prompting: &Prompting) -> Result<(), LmError> {
        match prompting {
            Prompting::Bare => {}
            Prompting::Instructed(t) | Prompting::Padded(t) => {
                if t.task != task {
                    return Err(LmError::Layout(format!("instruction for {} used on {task}", t.task)));
                }
                let pad = matches!(prompting, Prompting::Padded(_));
                self.special(if pad { Special::Pad } else { Special::marker(task) }, true);
                for w in &t.words {
                    match pad {
                        true => self.special(Special::Pad, true),
                        false => self.words(&[w.to_string()], true)?,
                    }
                }
            }
        }
        Ok(())
    }
}

fn required<'a, T: ?Sized>(part: Option<&'a T>, task: Task, what: &str) -> Result<&'a T, LmError> {
    part.ok_or_else(|| LmError::Layout(format!("{task} needs {what}")))
}

fn build(
    vocab: &UnifiedVocab,
    task: Task,
    prompting: &Prompting,
    parts: SequenceParts<'_>,
    with_target: bool,
) -> Result<TokenSequence, LmError> {
    let mut b = Builder { vocab, seq: TokenSequence { ids: vec![], modality: vec![], condition_mask: vec![] } };
    b.special(Special::Bos, true);
    b.prompt(task, prompting)?;
    match task {
        Task::CxrToReport => {
            b.image(required(parts.image, task, "image tokens")?, true)?;
            b.special(Special::Sep, true);
            if with_target {
                b.words(required(parts.text, task, "a report")?, false)?;
            }
        }
        Task::ReportToCxr => {
            b.words(required(parts.text, task, "a report")?, true)?;
            b.special(Special::Sep, true);
            if with_target {
                b.image(required(parts.image, task, "image tokens")?, false)?;
            }
        }
        Task::Vqa => {
            b.image(required(parts.image, task, "image tokens")?, true)?;
            b.words(required(parts.question, task, "a question")?, true)?;
            b.special(Special::Sep, true);
            if with_target {
                b.words(required(parts.text, task, "an answer")?, false)?;
            }
        }
    }
    if with_target {
        b.special(Special::Eos, false);
    }
    Ok(b.seq)
}

/// Full training layout for `task`:
/// - cxr_to_report: `BOS prompt IMG_START z… IMG_END SEP report… EOS`
/// - report_to_cxr: `BOS prompt report… SEP IMG_START z… IMG_END EOS`
/// - vqa: `BOS prompt IMG_START z… IMG_END question… SEP answer… EOS`
///
/// Everything through SEP is conditioning. `prompt` is the task marker and
/// instruction words, PADs in their place, or nothing.
pub fn assemble_sequence(
    vocab: &UnifiedVocab,
    task: Task,
    prompting: &Prompting,
    parts: SequenceParts<'_>,
    context: usize,
) -> Result<TokenSequence, LmError> {
    let seq = build(vocab, task, prompting, parts, true)?;
    if seq.len() > context {
        return Err(LmError::Layout(format!("{task} sequence of length {} exceeds context {context}", seq.len())));
    }
    Ok(seq)
}

/// The conditioning prefix of [`assemble_sequence`], ending at SEP.
pub fn assemble_condition(
    vocab: &UnifiedVocab,
    task: Task,
    prompting: &Prompting,
    parts: SequenceParts<'_>,
) -> Result<TokenSequence, LmError> {
    build(vocab, task, prompting, parts, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{template, tokenize};
    use crate::lm::default_vocab;

    fn words(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn report_layout_counts() {
        let v = default_vocab(128).unwrap();
        let codes: Vec<usize> = (0..64).map(|i| i % 128).collect();
        let report = words("a small nodule is seen in the left upper lung zone .");
        assert_eq!(report.len(), 12);
        let p = Prompting::Instructed(template(Task::CxrToReport, 0).unwrap());
        let s = assemble_sequence(&v, Task::CxrToReport, &p, SequenceParts { image: Some(&codes), text: Some(&report), question: None }, 192)
            .unwrap();
        // 82 ids including BOS, so 81 next-token targets; the first 68
        // targets are conditioning and 13 (report + EOS) are scored.
        assert_eq!(s.len(), 82);
        let targets_masked = s.condition_mask[1..].iter().take_while(|&&m| m).count();
        assert_eq!(targets_masked, 68);
        assert_eq!(s.loss_positions().len(), 13);
        assert_eq!(s.ids[68], v.special(Special::Sep));
        s.validate(&v, 64).unwrap();
    }

    #[test]
    fn empty_report_scores_only_eos() {
        let v = default_vocab(128).unwrap();
        let codes = vec![3; 64];
        let s = assemble_sequence(&v, Task::CxrToReport, &Prompting::Bare, SequenceParts { image: Some(&codes), text: Some(&[]), question: None }, 192)
            .unwrap();
        let n = s.len();
        assert_eq!(s.ids[n - 2], v.special(Special::Sep));
        assert_eq!(s.ids[n - 1], v.special(Special::Eos));
        assert_eq!(s.loss_positions(), vec![n - 1]);
    }

    #[test]
    fn vqa_single_word_answer_scores_two_positions() {
        let v = default_vocab(128).unwrap();
        let codes = vec![0; 64];
        let q = words("is there a nodule ?");
        let a = words("yes");
        let p = Prompting::Instructed(template(Task::Vqa, 1).unwrap());
        let s = assemble_sequence(&v, Task::Vqa, &p, SequenceParts { image: Some(&codes), text: Some(&a), question: Some(&q) }, 192).unwrap();
        assert_eq!(s.loss_positions().len(), 2);
        s.validate(&v, 64).unwrap();
    }

    #[test]
    fn image_target_layout() {
        let v = default_vocab(128).unwrap();
        let codes: Vec<usize> = (0..64).collect();
        let report = words("no acute findings .");
        let p = Prompting::Instructed(template(Task::ReportToCxr, 2).unwrap());
        let s = assemble_sequence(&v, Task::ReportToCxr, &p, SequenceParts { image: Some(&codes), text: Some(&report), question: None }, 192)
            .unwrap();
        // IMG_START, 64 codes, IMG_END, EOS.
        assert_eq!(s.loss_positions().len(), 67);
        let cond = assemble_condition(&v, Task::ReportToCxr, &p, SequenceParts { text: Some(&report), ..Default::default() }).unwrap();
        assert_eq!(&s.ids[..cond.len()], &cond.ids[..]);
        assert_eq!(*cond.ids.last().unwrap(), v.special(Special::Sep));
    }

    #[test]
    fn padding_keeps_length_and_hides_the_task() {
        let v = default_vocab(128).unwrap();
        let codes = vec![1; 64];
        let report = words("the lungs are clear .");
        let t = template(Task::CxrToReport, 2).unwrap();
        let parts = SequenceParts { image: Some(&codes), text: Some(&report), question: None };
        let a = assemble_sequence(&v, Task::CxrToReport, &Prompting::Instructed(t.clone()), parts, 192).unwrap();
        let b = assemble_sequence(&v, Task::CxrToReport, &Prompting::Padded(t.clone()), parts, 192).unwrap();
        assert_eq!(a.len(), b.len());
        let pad = v.special(Special::Pad);
        assert!(b.ids[1..2 + t.words.len()].iter().all(|&i| i == pad));
        assert!(!b.ids.contains(&v.special(Special::TaskReport)));
    }

    #[test]
    fn errors() {
        let v = default_vocab(128).unwrap();
        let codes = vec![0; 64];
        let parts = SequenceParts { image: Some(&codes), text: None, question: None };
        assert!(assemble_sequence(&v, Task::CxrToReport, &Prompting::Bare, parts, 192).is_err());
        let report = words("no acute findings .");
        let parts = SequenceParts { image: Some(&codes), text: Some(&report), question: None };
        let err = assemble_sequence(&v, Task::CxrToReport, &Prompting::Bare, parts, 50).unwrap_err();
        assert!(err.to_string().contains("exceeds context 50"));
        let wrong = Prompting::Instructed(template(Task::Vqa, 0).unwrap());
        assert!(assemble_sequence(&v, Task::CxrToReport, &wrong, parts, 192).is_err());
        let big = vec![200; 64];
        let parts = SequenceParts { image: Some(&big), text: Some(&report), question: None };
        assert!(assemble_sequence(&v, Task::CxrToReport, &Prompting::Bare, parts, 192).is_err());
    }
}
