//! One scene per line:
//! `{"image_id", "canvas", "proposals", "features", "tags", "gt"}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bag, BBox, Dataset, GroundTruth, GtObject};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image_id: String,
    canvas: [f64; 2],
    proposals: Vec<[f64; 4]>,
    features: Vec<Vec<f64>>,
    tags: Vec<u8>,
    gt: Vec<(f64, f64, f64, f64, usize)>,
}

impl Record {
    fn from_scene(bag: &Bag, gt: &GroundTruth) -> Self {
        Record {
            image_id: bag.image_id.clone(),
            canvas: bag.canvas,
            proposals: bag.proposals.iter().map(|b| b.to_array()).collect(),
            features: (0..bag.features.rows())
                .map(|r| bag.features.row(r).to_vec())
                .collect(),
            tags: bag.tags.clone(),
            gt: gt
                .objects
                .iter()
                .map(|o| (o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2, o.class))
                .collect(),
        }
    }

    fn into_scene(self) -> Result<(Bag, GroundTruth)> {
        let proposals = self
            .proposals
            .iter()
            .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
            .collect::<Result<Vec<_>>>()?;
        let features = Tensor::from_rows(&self.features)?;
        let k = self.tags.len();
        let objects = self
            .gt
            .iter()
            .map(|&(x1, y1, x2, y2, class)| {
                if class >= k {
                    return Err(Error::Contract(format!(
                        "ground-truth class {} out of range for {} classes",
                        class, k
                    )));
                }
                Ok(GtObject {
                    bbox: BBox::new(x1, y1, x2, y2)?,
                    class,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bag = Bag {
            image_id: self.image_id.clone(),
            canvas: self.canvas,
            proposals,
            features,
            tags: self.tags,
        };
        bag.validate(false)?;
        Ok((
            bag,
            GroundTruth {
                image_id: self.image_id,
                objects,
            },
        ))
    }
}

pub fn write_jsonl<W: Write>(mut w: W, dataset: &Dataset) -> Result<()> {
    for (bag, gt) in dataset.bags.iter().zip(&dataset.ground_truth) {
        let line = serde_json::to_string(&Record::from_scene(bag, gt))
            .map_err(|e| Error::Contract(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_jsonl(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    write_jsonl(BufWriter::new(File::create(path)?), dataset)
}

pub fn read_jsonl<R: Read>(r: R) -> Result<Dataset> {
    let mut dataset = Dataset::default();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let (bag, gt) = record.into_scene().map_err(|e| parse_err(e.to_string()))?;
        if let Some((k, d)) = dataset.dims() {
            if (bag.num_classes(), bag.feature_dim()) != (k, d) {
                return Err(parse_err(format!(
                    "expected {} classes / {} features, got {} / {}",
                    k,
                    d,
                    bag.num_classes(),
                    bag.feature_dim()
                )));
            }
        }
        dataset.bags.push(bag);
        dataset.ground_truth.push(gt);
    }
    Ok(dataset)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    read_jsonl(File::open(path)?)
}
