use hvq_core::data::{synth_generate, SyntheticSpec};
use hvq_core::metrics::{evaluate, ActivityPredictions, EvalOptions};

/// Labels every frame with the action of its nearest subaction mean.
#[test]
fn nearest_mean_oracle_segments_canonical_spec() {
    let synth = synth_generate(&SyntheticSpec::default()).unwrap();
    let labels = synth.activity.labels.clone().unwrap();
    let predicted: Vec<Vec<usize>> = synth
        .activity
        .videos
        .iter()
        .map(|video| {
            video
                .frames
                .view()
                .rows()
                .into_iter()
                .map(|row| {
                    let best = synth
                        .sub_means
                        .rows()
                        .into_iter()
                        .enumerate()
                        .map(|(j, m)| (j, (&row - &m).mapv(|v| v * v).sum()))
                        .min_by(|a, b| a.1.total_cmp(&b.1))
                        .unwrap()
                        .0;
                    synth.sub_to_action[best]
                })
                .collect()
        })
        .collect();
    let preds = ActivityPredictions {
        name: synth.activity.name.clone(),
        video_ids: synth.activity.videos.iter().map(|v| v.id.clone()).collect(),
        pred: predicted,
        gt: labels,
        background: None,
    };
    let report = evaluate(&[preds], &EvalOptions::default()).unwrap();
    assert!(report.macro_avg.mof >= 0.99, "oracle MoF {}", report.macro_avg.mof);
}
