use std::thread;

use crate::data::{batch_images, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_image, ImageReport, MetricReport};
use crate::model::decoder::predict;
use crate::model::SegModel;

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub images: Vec<ImageReport>,
    pub report: MetricReport,
    /// Predicted class map per sample, row-major.
    pub predictions: Vec<Vec<u8>>,
}

/// Predicts every sample and scores it against its label. Metric computation
/// is spread over threads; results do not depend on the thread count.
pub fn evaluate(
    model: &SegModel<f32>,
    samples: &[&Sample],
    batch_size: usize,
    iou_threshold: f64,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let classes = model.config.decoder.num_classes;
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let logits = model.infer(&batch_images(chunk)?)?;
        let flat = predict(&logits);
        let per = flat.len() / chunk.len();
        predictions.extend(flat.chunks(per).map(<[u8]>::to_vec));
    }
    for s in samples {
        s.validate_classes(classes)?;
    }
    let workers = thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(samples.len());
    let per_worker = samples.len().div_ceil(workers);
    let images: Vec<ImageReport> = thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(per_worker)
            .zip(predictions.chunks(per_worker))
            .map(|(ss, ps)| {
                scope.spawn(move || {
                    ss.iter()
                        .zip(ps)
                        .map(|(s, p)| evaluate_image(&s.id, p, &s.label, (s.height, s.width), classes, iou_threshold))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("metric worker panicked"))
            .collect()
    });
    let report = MetricReport::aggregate(&images);
    Ok(Evaluation {
        images,
        report,
        predictions,
    })
}
