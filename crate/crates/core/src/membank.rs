//! Rollout memory: corrected posterior latents in write order, plus the
//! positional view and drift-difference sequence used by retrieval.
//!
//! Entries stay raw. Positional embeddings are added only when a view is
//! requested, one table row per bank position.

use crate::error::{Error, Result};
use crate::numcore::{GradTape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct MemoryEntry {
    pub rollout_index: usize,
    pub latent: Var,
}

/// One read of the bank: which rollout step read which stored indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessRecord {
    pub step: usize,
    pub read: Vec<usize>,
}

pub struct MemoryBank {
    entries: Vec<MemoryEntry>,
    capacity: usize,
    pos_table: Var,
    current_step: usize,
    log: Vec<AccessRecord>,
}

impl MemoryBank {
    /// `pos_table` must be a `capacity × D` node on the tape the entries live on.
    pub fn new(capacity: usize, pos_table: Var) -> Self {
        Self {
            entries: Vec::with_capacity(capacity),
            capacity,
            pos_table,
            current_step: 0,
            log: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn pos_table(&self) -> Var {
        self.pos_table
    }

    /// Tag subsequent reads with rollout step `r`.
    pub fn begin_step(&mut self, r: usize) {
        self.current_step = r;
    }

    pub fn access_log(&self) -> &[AccessRecord] {
        &self.log
    }

    fn record_read(&mut self, indices: Vec<usize>) {
        self.log.push(AccessRecord {
            step: self.current_step,
            read: indices,
        });
    }

    pub fn write(&mut self, z: Var, rollout_index: usize) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if rollout_index <= last.rollout_index {
                return Err(Error::Contract(format!(
                    "rollout index {rollout_index} not after last stored index {}",
                    last.rollout_index
                )));
            }
        }
        if self.entries.len() >= self.capacity {
            return Err(Error::Capacity {
                capacity: self.capacity,
            });
        }
        self.entries.push(MemoryEntry {
            rollout_index,
            latent: z,
        });
        Ok(())
    }

    /// Entry `i` plus positional row `i` broadcast over tokens.
    pub fn view_with_pos(&mut self, tape: &mut GradTape) -> Result<Vec<Var>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyMemory);
        }
        self.record_read(self.entries.iter().map(|e| e.rollout_index).collect());
        let mut out = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let p = tape.row(self.pos_table, i)?;
            out.push(tape.add_row(e.latent, p)?);
        }
        Ok(out)
    }

    /// Zero row followed by consecutive differences of `view`.
    pub fn drift_sequence(tape: &mut GradTape, view: &[Var]) -> Result<Vec<Var>> {
        let first = *view.first().ok_or(Error::EmptyMemory)?;
        let [r, c] = tape.value(first).shape();
        let mut out = Vec::with_capacity(view.len());
        out.push(tape.constant(Tensor::zeros(r, c)));
        for w in view.windows(2) {
            out.push(tape.sub(w[1], w[0])?);
        }
        Ok(out)
    }

    /// Convenience wrapper: positional view then its drift sequence.
    pub fn drift_sequence_of(&mut self, tape: &mut GradTape) -> Result<Vec<Var>> {
        let view = self.view_with_pos(tape)?;
        Self::drift_sequence(tape, &view)
    }

    /// Most recent raw entry, or `z_prior` when the bank is empty.
    pub fn reference(&mut self, z_prior: Var) -> Var {
        match self.entries.last() {
            Some(e) => {
                let (idx, latent) = (e.rollout_index, e.latent);
                self.record_read(vec![idx]);
                latent
            }
            None => z_prior,
        }
    }

    /// Drop all entries and the access log. The positional table is kept.
    pub fn clear(&mut self) {
        self.entries.clear();
        self.log.clear();
        self.current_step = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(cap: usize, d: usize) -> (GradTape, MemoryBank) {
        let mut tape = GradTape::new();
        let pos = tape.param("pos", Tensor::zeros(cap, d));
        (tape, MemoryBank::new(cap, pos))
    }

    fn latent(tape: &mut GradTape, v: f64) -> Var {
        tape.constant(Tensor::from_rows(&[&[v, v + 1.0], &[v * 2.0, -v]]).unwrap())
    }

    #[test]
    fn write_and_reference() {
        let (mut tape, mut bank) = setup(4, 2);
        let prior = latent(&mut tape, 9.0);
        assert_eq!(bank.reference(prior), prior);
        let z1 = latent(&mut tape, 1.0);
        bank.write(z1, 1).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.reference(prior), z1);
        let z2 = latent(&mut tape, 2.0);
        bank.write(z2, 2).unwrap();
        assert_eq!(bank.reference(prior), z2);
        let z3 = latent(&mut tape, 3.0);
        bank.write(z3, 3).unwrap();
        assert_eq!(bank.drift_sequence_of(&mut tape).unwrap().len(), 3);
        bank.clear();
        assert_eq!(bank.len(), 0);
        assert_eq!(bank.reference(prior), prior);
    }

    #[test]
    fn write_rejects_stale_index_and_overflow() {
        let (mut tape, mut bank) = setup(2, 2);
        let z = latent(&mut tape, 1.0);
        bank.write(z, 3).unwrap();
        assert!(matches!(bank.write(z, 3), Err(Error::Contract(_))));
        assert!(matches!(bank.write(z, 1), Err(Error::Contract(_))));
        bank.write(z, 4).unwrap();
        assert!(matches!(bank.write(z, 5), Err(Error::Capacity { capacity: 2 })));
    }

    #[test]
    fn empty_bank_views_error() {
        let (mut tape, mut bank) = setup(2, 2);
        assert!(matches!(bank.view_with_pos(&mut tape), Err(Error::EmptyMemory)));
        assert!(matches!(
            bank.drift_sequence_of(&mut tape),
            Err(Error::EmptyMemory)
        ));
    }

    #[test]
    fn positional_view() {
        let mut tape = GradTape::new();
        let table = Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 3.0], &[0.0, 0.0]]).unwrap();
        let pos = tape.param("pos", table);
        let mut bank = MemoryBank::new(3, pos);
        let z = latent(&mut tape, 1.0);
        bank.write(z, 1).unwrap();
        let view = bank.view_with_pos(&mut tape).unwrap();
        let expect = tape
            .value(z)
            .add_row(&Tensor::from_rows(&[&[0.5, -1.0]]).unwrap())
            .unwrap();
        assert_eq!(tape.value(view[0]), &expect);
        bank.write(z, 2).unwrap();
        bank.write(z, 3).unwrap();
        assert_eq!(bank.view_with_pos(&mut tape).unwrap().len(), 3);
        // stored entries untouched
        assert_eq!(bank.entries()[0].latent, z);
    }

    #[test]
    fn zero_table_view_is_raw_and_drift_differences() {
        let (mut tape, mut bank) = setup(3, 2);
        let z1 = latent(&mut tape, 1.0);
        bank.write(z1, 1).unwrap();
        let single = bank.drift_sequence_of(&mut tape).unwrap();
        assert_eq!(tape.value(single[0]), &Tensor::zeros(2, 2));

        let c = Tensor::full(2, 2, 0.25);
        let shifted = tape.value(z1).add(&c).unwrap();
        let z2 = tape.constant(shifted);
        bank.write(z2, 2).unwrap();
        let view = bank.view_with_pos(&mut tape).unwrap();
        assert_eq!(tape.value(view[0]), tape.value(z1));
        assert_eq!(tape.value(view[1]), tape.value(z2));
        let drift = MemoryBank::drift_sequence(&mut tape, &view).unwrap();
        assert_eq!(tape.value(drift[0]), &Tensor::zeros(2, 2));
        assert!(tape.value(drift[1]).max_abs_diff(&c).unwrap() < 1e-15);

        let (mut tape, mut bank) = setup(3, 2);
        let z = latent(&mut tape, 1.5);
        bank.write(z, 1).unwrap();
        bank.write(z, 2).unwrap();
        let drift = bank.drift_sequence_of(&mut tape).unwrap();
        for d in drift {
            assert_eq!(tape.value(d), &Tensor::zeros(2, 2));
        }
    }

    #[test]
    fn access_log_tags_steps() {
        let (mut tape, mut bank) = setup(3, 2);
        let z = latent(&mut tape, 1.0);
        bank.write(z, 1).unwrap();
        bank.begin_step(2);
        bank.view_with_pos(&mut tape).unwrap();
        assert_eq!(
            bank.access_log(),
            &[AccessRecord {
                step: 2,
                read: vec![1]
            }]
        );
    }
}
