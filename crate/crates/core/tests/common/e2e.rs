//! Scoring of recovered sites against planted ground truth.

use stkit::manifest::time::parse_timestamp;
use stkit::pipeline::synth::PlantedSite;
use stkit::track::SiteProposal;

pub const MIN_IOU: f64 = 0.5;
pub const MAX_DATE_DAYS: i64 = 366;

pub fn iou(a: &stkit::track::Polygon, b: &stkit::track::Polygon, w: usize, h: usize) -> f64 {
    let (ma, mb) = (a.mask(w, h, 1.0), b.mask(w, h, 1.0));
    let inter = ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count();
    let union = ma.iter().zip(&mb).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn days(a: &str, b: &str) -> i64 {
    (parse_timestamp(a).unwrap() - parse_timestamp(b).unwrap()).num_days().abs()
}

#[derive(Debug)]
pub struct Score {
    /// Per planted site: best IoU, start and end errors in days.
    pub recovered: Vec<(f64, i64, i64)>,
    pub false_positives: Vec<String>,
}

impl Score {
    pub fn passed(&self) -> bool {
        self.false_positives.is_empty() && self.recovered.iter().all(|&(iou, s, e)| iou >= MIN_IOU && s <= MAX_DATE_DAYS && e <= MAX_DATE_DAYS)
    }
}

/// `dims(video_id)` gives the video's (width, height).
pub fn score(truth: &[PlantedSite], sites: &[SiteProposal], dims: impl Fn(i64) -> (usize, usize)) -> Score {
    let accepted: Vec<&SiteProposal> = sites.iter().filter(|s| s.accepted()).collect();
    let mut used = vec![false; accepted.len()];
    let mut recovered = Vec::new();
    for t in truth {
        let (w, h) = dims(t.video_id);
        let best = accepted
            .iter()
            .enumerate()
            .filter(|(_, s)| s.video_id == t.video_id)
            .map(|(i, s)| (i, iou(&t.polygon, &s.polygon, w, h)))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((i, v)) if v > 0.0 => {
                used[i] = true;
                let s = accepted[i];
                recovered.push((v, days(s.start_date.as_deref().unwrap(), &t.start), days(s.end_date.as_deref().unwrap(), &t.end)));
            }
            _ => recovered.push((0.0, i64::MAX, i64::MAX)),
        }
    }
    let false_positives = accepted.iter().zip(&used).filter(|(_, u)| !**u).map(|(s, _)| s.site_id.clone()).collect();
    Score { recovered, false_positives }
}
