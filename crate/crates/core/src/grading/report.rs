//! Per-participant reports: a structured document whose first page is the
//! overview, followed by one archive section per exercise in exam order.

use serde::{Deserialize, Serialize};

use super::{GradeBookEntry, GradingError};
use crate::config::{GradeBoundary, ParticipantEntry};
use crate::exercise::{archive_view, render_fragment, ArchiveFragment};
use crate::points::Points;
use crate::session::SessionStore;

/// Separates pages in the rendered text.
pub const PAGE_BREAK: char = '\x0c';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub participant_id: String,
    pub name: String,
    pub matriculation_no: String,
    pub exam_title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverviewRow {
    pub exercise_id: String,
    pub title: String,
    pub score: Points,
    pub max_points: Points,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overview {
    pub rows: Vec<OverviewRow>,
    pub bonus: Points,
    pub total: Points,
    pub max_total: Points,
    pub grade: String,
    pub pass_threshold: Points,
    pub chart: Vec<GradeBoundary>,
    pub fail_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSection {
    pub fragment: ArchiveFragment,
    /// The fragment rendered through the exercise's archive template.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub header: ReportHeader,
    pub overview: Overview,
    pub sections: Vec<ReportSection>,
}

/// Builds the report of one complete gradebook entry.
pub fn assemble_report(entry: &GradeBookEntry, session: &SessionStore) -> Result<Report, GradingError> {
    let blocking = entry.blocking_slots();
    if !blocking.is_empty() {
        return Err(GradingError::Incomplete {
            participant: entry.participant_id.clone(),
            slots: blocking,
        });
    }
    let config = session.config();
    let person: &ParticipantEntry = config
        .participant(&entry.participant_id)
        .ok_or_else(|| GradingError::UnknownParticipant(entry.participant_id.clone()))?;
    let state = session.snapshot();

    let mut rows = Vec::new();
    let mut sections = Vec::new();
    for slot in &entry.per_exercise {
        let result = slot.result.as_ref().expect("complete entries have every result");
        let bundle = session
            .bundle(&slot.exercise_id)
            .ok_or_else(|| GradingError::UnknownExercise {
                participant: entry.participant_id.clone(),
                exercise: slot.exercise_id.clone(),
            })?;
        let variant = session.variant_for(&entry.participant_id, &slot.exercise_id)?;
        let answer = state
            .latest_answer(&entry.participant_id, &slot.exercise_id)
            .map(|a| a.body.as_str());
        let fragment = archive_view(&bundle, &variant, answer, result);
        rows.push(OverviewRow {
            exercise_id: slot.exercise_id.clone(),
            title: bundle.title.clone(),
            score: fragment.score,
            max_points: fragment.max_points,
        });
        let text = render_fragment(&fragment, &bundle.archive_template);
        sections.push(ReportSection { fragment, text });
    }

    let chart = &config.grade_chart;
    Ok(Report {
        header: ReportHeader {
            participant_id: entry.participant_id.clone(),
            name: person.display_name.clone(),
            matriculation_no: person.matriculation_no.clone(),
            exam_title: config.title.clone(),
        },
        overview: Overview {
            max_total: rows.iter().map(|r| r.max_points).sum(),
            rows,
            bonus: entry.bonus,
            total: entry.total,
            grade: entry.grade_label.clone(),
            pass_threshold: chart.pass_threshold,
            chart: chart.boundaries.clone(),
            fail_label: chart.fail_label.clone(),
        },
        sections,
    })
}

impl Report {
    /// Page texts; page 1 is the overview.
    pub fn pages(&self) -> Vec<String> {
        let h = &self.header;
        let o = &self.overview;
        let mut overview = format!(
            "{}\n{} ({}), matriculation no. {}\n\nOverview\n========\n\n",
            h.exam_title, h.name, h.participant_id, h.matriculation_no
        );
        let width = o.rows.iter().map(|r| r.title.chars().count()).max().unwrap_or(0).max(8);
        for row in &o.rows {
            overview.push_str(&format!(
                "{:<width$}  {:>6} / {}\n",
                row.title,
                row.score.to_string(),
                row.max_points
            ));
        }
        overview.push_str(&format!("{:<width$}  {:>6}\n", "Bonus", o.bonus.to_string()));
        overview.push_str(&format!(
            "{:<width$}  {:>6} / {}\n\n",
            "Total",
            o.total.to_string(),
            o.max_total
        ));
        overview.push_str("Grade chart\n");
        for b in &o.chart {
            overview.push_str(&format!("  from {:>6} points: {}\n", b.min_points.to_string(), b.label));
        }
        overview.push_str(&format!(
            "  below {:>5} points: {}\n\n",
            o.pass_threshold.to_string(),
            o.fail_label
        ));
        overview.push_str(&format!("Grade: {}\n", o.grade));

        std::iter::once(overview)
            .chain(self.sections.iter().map(|s| s.text.clone()))
            .collect()
    }

    /// Print-ready text with form feeds between pages.
    pub fn render(&self) -> String {
        self.pages().join(&PAGE_BREAK.to_string())
    }

    pub fn file_name(&self) -> String {
        format!("{}.txt", self.header.participant_id)
    }
}
