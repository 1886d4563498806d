use ndarray::{Array2, ArrayView1, Axis};

use super::LabelRegistry;
use crate::autograd::sigmoid;
use crate::codec::{encode_mentions, Action, ActionVocabulary, Mention, Sentence};
use crate::error::{Error, Result};

/// Multi-hot gold supervision `G` for one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldActionMatrix {
    g: Array2<f64>,
    task_mask: Vec<bool>,
    inserted: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Run {
    None,
    Open,
    Close,
}

/// Packs a canonical action list into rows: one row per `SH` and per `EOA`;
/// a run of consecutive `TR`s shares a row, as does a run of consecutive
/// `RE`s. A run is split when an action would repeat inside it.
pub fn pack_actions(actions: &[Action], vocab: &ActionVocabulary) -> Array2<f64> {
    let mut rows: Vec<Vec<usize>> = Vec::new();
    let mut run = Run::None;
    for &a in actions {
        let col = vocab.index_of(a);
        let kind = match a {
            Action::Shift | Action::End => Run::None,
            Action::Open(_) => Run::Open,
            Action::Close(_) => Run::Close,
        };
        let extend = kind != Run::None && kind == run && !rows.last().is_some_and(|r| r.contains(&col));
        if extend {
            rows.last_mut().expect("run has a row").push(col);
        } else {
            rows.push(vec![col]);
        }
        run = kind;
    }
    let mut g = Array2::zeros((rows.len(), vocab.len()));
    for (t, cols) in rows.iter().enumerate() {
        for &c in cols {
            g[[t, c]] = 1.0;
        }
    }
    g
}

/// Encodes a sample's mentions (already in disjoint-union labels) and packs
/// them into `G`, with the task mask of `dataset`.
pub fn build_gold_matrix(
    sentence: &Sentence,
    mentions: &[Mention],
    dataset: &str,
    registry: &LabelRegistry,
) -> Result<GoldActionMatrix> {
    let vocab = registry.vocab();
    let task_mask = registry.task_mask(dataset)?;
    for m in mentions {
        if registry.dataset_of(&m.label) != Some(dataset) {
            return Err(Error::UnknownLabel(format!("{} (not a label of dataset {dataset})", m.label)));
        }
    }
    let seq = encode_mentions(sentence, mentions, vocab)?;
    Ok(GoldActionMatrix { g: pack_actions(seq.actions(), vocab), task_mask, inserted: 0 })
}

impl GoldActionMatrix {
    pub fn from_parts(g: Array2<f64>, task_mask: Vec<bool>) -> Self {
        assert_eq!(g.ncols(), task_mask.len());
        Self { g, task_mask, inserted: 0 }
    }

    pub fn rows(&self) -> usize {
        self.g.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.g
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.g
    }

    pub fn task_mask(&self) -> &[bool] {
        &self.task_mask
    }

    /// Number of delay rows inserted so far.
    pub fn inserted(&self) -> usize {
        self.inserted
    }

    /// Row `t` is a full (undelayed) shift.
    pub fn is_shift_row(&self, t: usize) -> bool {
        self.g[[t, ActionVocabulary::SHIFT]] == 1.0
    }

    /// Softens row `t` with the model's logits `u`.
    ///
    /// Out-of-task cells take `σ(u_a)`. When row `t` is a gold shift and some
    /// out-of-task action outscores `SH`, the shift is delayed: its cell
    /// becomes `σ(u_SH)` and a one-hot `SH` row is inserted after `t`. Without
    /// `allow_insert` the shift stays in place.
    pub fn augment(&mut self, u: ArrayView1<'_, f64>, t: usize, allow_insert: bool) {
        assert_eq!(u.len(), self.g.ncols(), "logit row width must match G");
        let sh = ActionVocabulary::SHIFT;
        let mut outscored = false;
        for (a, &in_task) in self.task_mask.iter().enumerate() {
            if !in_task {
                self.g[[t, a]] = sigmoid(u[a]);
                outscored |= u[a] > u[sh];
            }
        }
        if allow_insert && outscored && self.g[[t, sh]] == 1.0 {
            self.g[[t, sh]] = sigmoid(u[sh]);
            let mut row = Array2::zeros((1, self.g.ncols()));
            row[[0, sh]] = 1.0;
            let (head, tail) = self.g.view().split_at(Axis(0), t + 1);
            self.g = ndarray::concatenate(Axis(0), &[head, row.view(), tail]).expect("equal widths");
            self.inserted += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::DatasetLabels;
    use super::*;
    use ndarray::array;

    fn genia_registry() -> LabelRegistry {
        LabelRegistry::single("G", &["DNA".into(), "Protein".into()]).unwrap()
    }

    fn rows_as_actions(g: &Array2<f64>, vocab: &ActionVocabulary) -> Vec<String> {
        g.rows()
            .into_iter()
            .map(|r| {
                let names: Vec<String> = r
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v == 1.0)
                    .map(|(c, _)| vocab.format_action(vocab.action(c)))
                    .collect();
                names.join("+")
            })
            .collect()
    }

    #[test]
    fn packs_the_worked_example() {
        let reg = genia_registry();
        let s = Sentence::new(["a", "defective", "NF", "-", "chi", "B", "site", "was", "completely"]);
        let m = reg
            .to_union("G", &[Mention::new(2, 6, "DNA"), Mention::new(2, 5, "Protein"), Mention::new(4, 5, "DNA")])
            .unwrap();
        let g = build_gold_matrix(&s, &m, "G", &reg).unwrap();
        let got = rows_as_actions(g.matrix(), reg.vocab());
        let expected = [
            "SH", "SH", "TR:G_DNA+TR:G_Protein", "SH", "SH", "TR:G_DNA", "SH", "SH", "RE:G_DNA+RE:G_Protein", "SH",
            "RE:G_DNA", "SH", "SH", "EOA",
        ];
        assert_eq!(got, expected);
    }

    #[test]
    fn empty_sentence_of_one_word() {
        let reg = genia_registry();
        let g = build_gold_matrix(&Sentence::new(["x"]), &[], "G", &reg).unwrap();
        assert_eq!(rows_as_actions(g.matrix(), reg.vocab()), ["SH", "EOA"]);
    }

    #[test]
    fn repeated_action_splits_a_run() {
        let reg = genia_registry();
        let m = reg.to_union("G", &[Mention::new(0, 1, "DNA"), Mention::new(0, 0, "DNA")]).unwrap();
        let g = build_gold_matrix(&Sentence::new(["x", "y"]), &m, "G", &reg).unwrap();
        assert_eq!(rows_as_actions(g.matrix(), reg.vocab()), ["TR:G_DNA", "TR:G_DNA", "SH", "RE:G_DNA", "SH", "RE:G_DNA", "EOA"]);
    }

    #[test]
    fn close_run_then_open_run_use_two_rows() {
        let reg = genia_registry();
        let m = reg.to_union("G", &[Mention::new(0, 0, "DNA"), Mention::new(1, 1, "Protein")]).unwrap();
        let g = build_gold_matrix(&Sentence::new(["x", "y"]), &m, "G", &reg).unwrap();
        assert_eq!(
            rows_as_actions(g.matrix(), reg.vocab()),
            ["TR:G_DNA", "SH", "RE:G_DNA", "TR:G_Protein", "SH", "RE:G_Protein", "EOA"]
        );
    }

    fn two_tasks() -> LabelRegistry {
        LabelRegistry::new(vec![
            DatasetLabels { name: "A".into(), types: vec!["X".into()] },
            DatasetLabels { name: "B".into(), types: vec!["Y".into()] },
        ])
        .unwrap()
    }

    #[test]
    fn out_of_task_cells_take_sigmoid() {
        let reg = two_tasks();
        let mut g = build_gold_matrix(&Sentence::new(["w"]), &[], "A", &reg).unwrap();
        g.augment(array![5.0, -5.0, 0.0, 0.0, 0.0, 0.0].view(), 0, true);
        assert_eq!(g.matrix().row(0).to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        assert_eq!(g.rows(), 2);
    }

    #[test]
    fn outscored_shift_is_delayed() {
        let reg = two_tasks();
        let mut g = build_gold_matrix(&Sentence::new(["w"]), &[], "A", &reg).unwrap();
        g.augment(array![0.0, -5.0, -1.0, -1.0, 1.0, -3.0].view(), 0, true);
        assert_eq!(g.rows(), 3);
        assert_eq!(g.matrix()[[0, 0]], 0.5);
        assert_eq!(g.matrix().row(1).to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.matrix().row(2).to_vec(), vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(!g.is_shift_row(0));
        assert!(g.is_shift_row(1));
        assert_eq!(g.inserted(), 1);

        let mut capped = build_gold_matrix(&Sentence::new(["w"]), &[], "A", &reg).unwrap();
        capped.augment(array![0.0, -5.0, -1.0, -1.0, 1.0, -3.0].view(), 0, false);
        assert_eq!(capped.rows(), 2);
        assert!(capped.is_shift_row(0));
    }
}
