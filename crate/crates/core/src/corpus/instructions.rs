//! Task instruction templates.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CxrToReport,
    ReportToCxr,
    Vqa,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::CxrToReport, Task::ReportToCxr, Task::Vqa];

    pub fn name(self) -> &'static str {
        match self {
            Task::CxrToReport => "cxr_to_report",
            Task::ReportToCxr => "report_to_cxr",
            Task::Vqa => "vqa",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An instruction is the task marker followed by `words`. Template 0 is the
/// bare marker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InstructionTemplate {
    pub task: Task,
    pub template_id: usize,
    pub words: Vec<&'static str>,
}

const CXR_TO_REPORT: [&[&str]; 3] = [&[], &["describe", "the", "findings"], &["write", "a", "report", "for", "this", "film"]];
const REPORT_TO_CXR: [&[&str]; 3] = [&[], &["generate", "the", "chest", "film"], &["draw", "an", "image", "for", "this", "report"]];
const VQA: [&[&str]; 3] = [&[], &["answer", "the", "question"], &["answer", "this", "question", "about", "the", "film"]];

pub fn templates(task: Task) -> Vec<InstructionTemplate> {
    let table = match task {
        Task::CxrToReport => &CXR_TO_REPORT,
        Task::ReportToCxr => &REPORT_TO_CXR,
        Task::Vqa => &VQA,
    };
    table
        .iter()
        .enumerate()
        .map(|(template_id, words)| InstructionTemplate { task, template_id, words: words.to_vec() })
        .collect()
}

pub fn template(task: Task, template_id: usize) -> Option<InstructionTemplate> {
    templates(task).into_iter().nth(template_id)
}
