//! Structured guidance reports (JSON). `schema/guidance-report.schema.json`
//! in the repository describes the format.

use serde::{Deserialize, Serialize};

use crate::guidance::{GuidanceParams, GuidanceResult, HeadAssessment};
use crate::records::{ImageGeometry, InferenceRecord};
use crate::spatial::Extraction;

pub const GUIDANCE_REPORT_KIND: &str = "guidance-report";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchWeights {
    pub entropy: f64,
    pub gradient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceReport {
    pub kind: String,
    pub version: u32,
    pub predicted_token: String,
    pub grid_side: usize,
    pub image: ImageGeometry,
    pub params: GuidanceParams,
    pub branch_weights: BranchWeights,
    pub gradient_available: bool,
    pub fallback: bool,
    pub warnings: Vec<String>,
    pub selected: Vec<HeadAssessment>,
    pub candidates: Vec<HeadAssessment>,
    pub bbox: Extraction,
}

impl GuidanceReport {
    pub fn new(record: &InferenceRecord, params: &GuidanceParams, result: &GuidanceResult) -> Self {
        Self {
            kind: GUIDANCE_REPORT_KIND.into(),
            version: 1,
            predicted_token: record.predicted_token().to_owned(),
            grid_side: record.grid_side(),
            image: record.image(),
            params: *params,
            branch_weights: BranchWeights {
                entropy: result.alpha,
                gradient: 1.0 - result.alpha,
            },
            gradient_available: result.gradient_available,
            fallback: result.fallback,
            warnings: result.warnings.clone(),
            selected: result.selected.clone(),
            candidates: result.candidates.clone(),
            bbox: result.crop,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}
