//! FIFO dictionary of key embeddings, each tagged with its source scene.

use std::collections::VecDeque;

use candle_core::{Device, Tensor};

use crate::dataset::SceneId;
use crate::error::{Error, Result};

/// Maximum deviation of a stored embedding's L2 norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub embedding: Vec<f32>,
    pub scene_id: SceneId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<QueueEntry>,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::param("queue capacity and dimension must be positive"));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first; entry `i` occupies label slot `i + 1`.
    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn get(&self, slot: usize) -> Option<&QueueEntry> {
        self.entries.get(slot)
    }

    /// Appends a batch, evicting the oldest entries beyond capacity. The batch
    /// is validated as a whole; on error the queue is unchanged.
    pub fn enqueue<I>(&mut self, batch: I) -> Result<()>
    where
        I: IntoIterator<Item = (Vec<f32>, SceneId)>,
    {
        let batch: Vec<_> = batch.into_iter().collect();
        for (emb, scene) in &batch {
            if emb.len() != self.dim {
                return Err(Error::contract(format!(
                    "embedding for scene {scene} has dimension {}, queue holds {}",
                    emb.len(),
                    self.dim
                )));
            }
            let norm = emb.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
                return Err(Error::contract(format!(
                    "embedding for scene {scene} has norm {norm}, expected 1"
                )));
            }
        }
        for (embedding, scene_id) in batch {
            self.entries.push_back(QueueEntry { embedding, scene_id });
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        Ok(())
    }

    /// Enqueues the rows of a `B×D` embedding tensor.
    pub fn enqueue_tensor(&mut self, z: &Tensor, scenes: &[SceneId]) -> Result<()> {
        let rows = z.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?;
        if rows.len() != scenes.len() {
            return Err(Error::contract("embedding rows and scene tags differ in count"));
        }
        self.enqueue(rows.into_iter().zip(scenes.iter().cloned()))
    }

    /// All stored embeddings as an `L×D` tensor, or `None` when empty.
    pub fn embeddings_tensor(&self, device: &Device) -> Result<Option<Tensor>> {
        if self.entries.is_empty() {
            return Ok(None);
        }
        let flat: Vec<f32> = self
            .entries
            .iter()
            .flat_map(|e| e.embedding.iter().copied())
            .collect();
        Ok(Some(Tensor::from_vec(flat, (self.entries.len(), self.dim), device)?))
    }

    pub fn scene_ids(&self) -> Vec<SceneId> {
        self.entries.iter().map(|e| e.scene_id.clone()).collect()
    }

    /// Rebuilds a queue from stored rows (oldest first), e.g. from a checkpoint.
    pub fn from_parts(capacity: usize, dim: usize, rows: Vec<Vec<f32>>, scenes: Vec<SceneId>) -> Result<Self> {
        if rows.len() > capacity || rows.len() != scenes.len() {
            return Err(Error::Checkpoint("queue contents inconsistent with capacity".into()));
        }
        let mut q = Self::new(capacity, dim)?;
        q.enqueue(rows.into_iter().zip(scenes))?;
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(dim: usize, hot: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[hot % dim] = 1.0;
        v
    }

    #[test]
    fn order_is_preserved() {
        let mut q = EmbeddingQueue::new(4, 3).unwrap();
        q.enqueue(vec![(unit(3, 0), "a".into()), (unit(3, 1), "b".into())]).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q.scene_ids(), vec![SceneId::from("a"), SceneId::from("b")]);
    }

    #[test]
    fn oldest_evicted_first() {
        let mut q = EmbeddingQueue::new(4, 3).unwrap();
        let items: Vec<_> = (0..5).map(|i| (unit(3, i), SceneId(format!("s{i}")))).collect();
        q.enqueue(items).unwrap();
        assert_eq!(q.len(), 4);
        assert_eq!(q.get(0).unwrap().scene_id.0, "s1");
        assert_eq!(q.get(3).unwrap().scene_id.0, "s4");
    }

    #[test]
    fn non_unit_rejected_atomically() {
        let mut q = EmbeddingQueue::new(4, 2).unwrap();
        let err = q
            .enqueue(vec![(vec![1.0, 0.0], "a".into()), (vec![1.0, 1.0], "b".into())])
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(q.is_empty());
        assert!(q.enqueue(vec![(vec![1.0, 0.0, 0.0], "a".into())]).is_err());
    }

    #[test]
    fn matches_list_reference_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cap = 13;
        let mut q = EmbeddingQueue::new(cap, 4).unwrap();
        let mut reference: Vec<(Vec<f32>, SceneId)> = Vec::new();
        let mut counter = 0usize;
        for _ in 0..1000 {
            let k = rng.random_range(0..6);
            let batch: Vec<_> = (0..k)
                .map(|_| {
                    counter += 1;
                    (unit(4, counter), SceneId(format!("s{counter}")))
                })
                .collect();
            q.enqueue(batch.clone()).unwrap();
            reference.extend(batch);
            let excess = reference.len().saturating_sub(cap);
            reference.drain(..excess);
            assert!(q.len() <= cap);
            let got: Vec<_> = q.iter().map(|e| (e.embedding.clone(), e.scene_id.clone())).collect();
            assert_eq!(got, reference);
        }
    }

    #[test]
    fn tensor_round_trip() {
        let mut q = EmbeddingQueue::new(4, 2).unwrap();
        assert!(q.embeddings_tensor(&Device::Cpu).unwrap().is_none());
        let z = Tensor::new(&[[0.6f32, 0.8], [0.0, 1.0]], &Device::Cpu).unwrap();
        q.enqueue_tensor(&z, &["a".into(), "b".into()]).unwrap();
        let t = q.embeddings_tensor(&Device::Cpu).unwrap().unwrap();
        assert_eq!(t.to_vec2::<f32>().unwrap(), z.to_vec2::<f32>().unwrap());
    }
}
