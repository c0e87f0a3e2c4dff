use super::EyeRecord;
use crate::encoders::Image;
use crate::error::{Error, Result};
use crate::model::SequenceBatch;

/// Right-pad each eye's visits to `l` with zero images.
pub fn pad_and_batch(eyes: &[&EyeRecord], l: usize) -> Result<SequenceBatch> {
    pad_and_batch_with(eyes, l, |_, _, img| img.clone())
}

/// As [`pad_and_batch`], passing every real image through `f(eye, visit, image)`.
pub fn pad_and_batch_with<F>(eyes: &[&EyeRecord], l: usize, mut f: F) -> Result<SequenceBatch>
where
    F: FnMut(usize, usize, &Image) -> Image,
{
    if eyes.is_empty() || l == 0 {
        return Err(Error::Data("cannot batch zero eyes or zero length".into()));
    }
    let mut shape = None;
    for e in eyes {
        if e.num_visits() > l {
            return Err(Error::Data(format!(
                "patient {} eye {} has {} visits, longer than l = {l}",
                e.patient_id,
                e.eye_id,
                e.num_visits()
            )));
        }
        if e.num_visits() == 0 || e.images.len() != e.num_visits() {
            return Err(Error::Data(format!(
                "patient {} eye {} needs one image per visit and at least one visit",
                e.patient_id, e.eye_id
            )));
        }
        for img in &e.images {
            match shape {
                None => shape = Some(img.shape()),
                Some(s) if s != img.shape() => {
                    return Err(Error::Data(format!("image shape {:?} differs from {s:?}", img.shape())))
                }
                _ => {}
            }
        }
    }
    let (c, h, w) = shape.expect("at least one image");
    let n = eyes.len() * l;
    let mut images = Vec::with_capacity(n);
    let mut visit_months = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for (b, e) in eyes.iter().enumerate() {
        for k in 0..l {
            if k < e.num_visits() {
                images.push(f(b, k, &e.images[k]));
                visit_months.push(e.visit_months[k] as f64);
                valid.push(true);
            } else {
                images.push(Image::zeros(c, h, w));
                visit_months.push(0.0);
                valid.push(false);
            }
        }
    }
    let batch = SequenceBatch {
        batch: eyes.len(),
        len: l,
        images,
        visit_months,
        valid,
        outcomes: eyes.iter().map(|e| e.outcome).collect(),
    };
    batch.validate()?;
    Ok(batch)
}
