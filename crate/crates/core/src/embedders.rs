//! Text and image embedders producing the rows of the fused input sequence.

use crate::data::{BBox, ImageSize, Region};
use crate::error::{Error, Result};
use crate::numerics::{lit, Scalar, Tape, Tensor, Var};
use crate::params::{Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tokenizer::EncodedInstruction;

pub const LOCATION_DIM: usize = 7;

/// Normalized `[x1, y1, x2, y2, w, h, w*h]` of a box.
pub fn location_features(bbox: &BBox, image: ImageSize) -> Result<[f32; LOCATION_DIM]> {
    bbox.validate()?;
    if image.w == 0 || image.h == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    let (iw, ih) = (image.w as f64, image.h as f64);
    let x1 = bbox.x1 as f64 / iw;
    let y1 = bbox.y1 as f64 / ih;
    let x2 = bbox.x2 as f64 / iw;
    let y2 = bbox.y2 as f64 / ih;
    let (w, h) = (x2 - x1, y2 - y1);
    Ok([x1, y1, x2, y2, w, h, w * h].map(|v| v as f32))
}

/// Word and position embedding tables, concatenated per token and projected
/// to the hidden width, then normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedder {
    pub word: ParamId,
    pub position: ParamId,
    pub fc: Linear,
    pub norm: LayerNorm,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl TextEmbedder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        vocab_size: usize,
        max_positions: usize,
        word_dim: usize,
        position_dim: usize,
        hidden: usize,
    ) -> Self {
        let word = store.add("text.word_embedding", init.weight(&[vocab_size, word_dim]));
        let position = store.add("text.position_embedding", init.weight(&[max_positions, position_dim]));
        let fc = Linear::new(store, init, "text.fc", word_dim + position_dim, hidden);
        let norm = LayerNorm::new(store, "text.norm", hidden);
        TextEmbedder {
            word,
            position,
            fc,
            norm,
            vocab_size,
            max_positions,
        }
    }

    /// `[T, H]` embedding of an encoded instruction.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        enc: &EncodedInstruction,
    ) -> Result<Var> {
        if let Some(&id) = enc.ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {id} exceeds vocabulary size {}",
                self.vocab_size
            )));
        }
        if let Some(&p) = enc.positions.iter().find(|&&p| p >= self.max_positions) {
            return Err(Error::invalid(format!(
                "position {p} exceeds the {} embedded positions",
                self.max_positions
            )));
        }
        let word_table = store.var(tape, self.word);
        let pos_table = store.var(tape, self.position);
        let words = tape.gather_rows(word_table, &enc.ids)?;
        let positions = tape.gather_rows(pos_table, &enc.positions)?;
        let joined = tape.concat_cols(&[words, positions])?;
        let h = self.fc.forward(tape, store, joined)?;
        self.norm.forward(tape, store, h)
    }
}

/// Separate projections of region features and location features,
/// concatenated, projected again, and normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedder {
    pub fc_feat: Linear,
    pub fc_loc: Linear,
    pub fc_out: Linear,
    pub norm: LayerNorm,
    pub feat_dim: usize,
}

impl ImageEmbedder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        feat_dim: usize,
        feat_hidden: usize,
        loc_hidden: usize,
        hidden: usize,
    ) -> Self {
        let fc_feat = Linear::new(store, init, "image.fc_feat", feat_dim, feat_hidden);
        let fc_loc = Linear::new(store, init, "image.fc_loc", LOCATION_DIM, loc_hidden);
        let fc_out = Linear::new(store, init, "image.fc_out", feat_hidden + loc_hidden, hidden);
        let norm = LayerNorm::new(store, "image.norm", hidden);
        ImageEmbedder {
            fc_feat,
            fc_loc,
            fc_out,
            norm,
            feat_dim,
        }
    }

    /// Embeds each region independently; row `i` of the `[n, H]` result
    /// depends only on `regions[i]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        regions: &[&Region],
        image: ImageSize,
    ) -> Result<Var> {
        let mut feats = Vec::with_capacity(regions.len() * self.feat_dim);
        let mut locs = Vec::with_capacity(regions.len() * LOCATION_DIM);
        for r in regions {
            if r.feat.len() != self.feat_dim {
                return Err(Error::shape("embed_region", &[self.feat_dim], &[r.feat.len()]));
            }
            feats.extend(r.feat.iter().map(|&v| lit::<T>(v as f64)));
            locs.extend(location_features(&r.bbox, image)?.iter().map(|&v| lit::<T>(v as f64)));
        }
        let feats = tape.leaf(Tensor::new(vec![regions.len(), self.feat_dim], feats)?);
        let locs = tape.leaf(Tensor::new(vec![regions.len(), LOCATION_DIM], locs)?);
        let f = self.fc_feat.forward(tape, store, feats)?;
        let l = self.fc_loc.forward(tape, store, locs)?;
        let joined = tape.concat_cols(&[f, l])?;
        let h = self.fc_out.forward(tape, store, joined)?;
        self.norm.forward(tape, store, h)
    }
}

/// `[N+1, H]`: the target in slot 0 followed by every context region. The
/// target must be one of the contexts, so it is embedded twice.
pub fn assemble_image_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    embedder: &ImageEmbedder,
    target: &Region,
    contexts: &[Region],
    image: ImageSize,
) -> Result<Var> {
    if contexts.is_empty() {
        return Err(Error::invalid("at least one context region is required"));
    }
    if !contexts.contains(target) {
        return Err(Error::invalid("target region is not among the context regions"));
    }
    let rows: Vec<&Region> = std::iter::once(target).chain(contexts).collect();
    embedder.forward(tape, store, &rows, image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::layer_norm;
    use crate::numerics::Prng;

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn location_feature_examples() {
        let img = ImageSize { w: 100, h: 200 };
        assert_eq!(location_features(&bx(0.0, 0.0, 100.0, 200.0), img).unwrap(), [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let f = location_features(&bx(10.0, 20.0, 30.0, 60.0), img).unwrap();
        for (a, b) in f.iter().zip([0.1, 0.1, 0.3, 0.3, 0.2, 0.2, 0.04]) {
            assert!((a - b).abs() < 1e-7, "{f:?}");
        }
        let flat = location_features(&bx(5.0, 5.0, 5.0, 50.0), img).unwrap();
        assert_eq!((flat[4], flat[6]), (0.0, 0.0));
        let inverted = BBox { x1: 9.0, y1: 0.0, x2: 1.0, y2: 1.0 };
        assert!(location_features(&inverted, img).is_err());
    }

    fn text_fixture(h: usize) -> (ParamStore<f64>, TextEmbedder) {
        let mut store = ParamStore::default();
        let mut init = Init::with_std(3, 0.5);
        let emb = TextEmbedder::new(&mut store, &mut init, 6, 4, h, h, h);
        (store, emb)
    }

    #[test]
    fn text_embedding_equals_one_hot_products() {
        let (store, emb) = text_fixture(3);
        let enc = EncodedInstruction { ids: vec![4, 1, 4], positions: vec![0, 1, 2] };
        let mut tape = Tape::checked();
        let out = emb.forward(&mut tape, &store, &enc).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 3]);

        // Oracle: explicit one-hot matrices times the tables, concatenated,
        // pushed through the projection and normalization.
        let one_hot = |idx: &[usize], n: usize| {
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let mut oracle = Tape::<f64>::new();
        let xw = oracle.leaf(one_hot(&enc.ids, 6));
        let xp = oracle.leaf(one_hot(&enc.positions, 4));
        let ww = oracle.leaf(store.get(emb.word).clone());
        let wp = oracle.leaf(store.get(emb.position).clone());
        let a = oracle.matmul(xw, ww).unwrap();
        let b = oracle.matmul(xp, wp).unwrap();
        let joined: Vec<Vec<f64>> = (0..3)
            .map(|r| [oracle.value(a).row(r), oracle.value(b).row(r)].concat())
            .collect();
        let fc = crate::numerics::ops::linear(
            &Tensor::from_rows(&joined).unwrap(),
            store.get(emb.fc.w),
            store.get(emb.fc.b),
        )
        .unwrap();
        let want = layer_norm(&fc, store.get(emb.norm.gain), store.get(emb.norm.bias), 1e-12).unwrap();
        assert!(tape.value(out).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn distinct_tokens_at_same_position_differ() {
        let (store, emb) = text_fixture(4);
        let run = |id| {
            let mut tape = Tape::new();
            let enc = EncodedInstruction { ids: vec![id], positions: vec![0] };
            let v = emb.forward(&mut tape, &store, &enc).unwrap();
            tape.value(v).clone()
        };
        assert_ne!(run(3), run(4));
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn text_overflow_is_rejected() {
        let (store, emb) = text_fixture(2);
        let mut tape = Tape::new();
        let bad_id = EncodedInstruction { ids: vec![6], positions: vec![0] };
        assert!(emb.forward(&mut tape, &store, &bad_id).is_err());
        let bad_pos = EncodedInstruction { ids: vec![0], positions: vec![4] };
        assert!(emb.forward(&mut tape, &store, &bad_pos).is_err());
    }

    fn region(rng: &mut Prng, d: usize) -> Region {
        let x = (rng.next_f64() * 50.0) as f32;
        let y = (rng.next_f64() * 50.0) as f32;
        Region {
            feat: (0..d).map(|_| rng.normal() as f32).collect(),
            bbox: bx(x, y, x + 20.0, y + 30.0),
            score: 0.5,
        }
    }

    fn embed_one(store: &ParamStore<f64>, emb: &ImageEmbedder, r: &Region, img: ImageSize) -> Tensor<f64> {
        let mut tape = Tape::new();
        let v = emb.forward(&mut tape, store, &[r], img).unwrap();
        tape.value(v).clone()
    }

    #[test]
    fn region_embedding_zero_weights_gives_normalized_bias() {
        let mut store = ParamStore::<f64>::default();
        let emb = ImageEmbedder::new(&mut store, &mut Init::new(0), 3, 2, 2, 4);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let bias = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]);
        *store.get_mut(emb.fc_out.b) = bias.clone();
        *store.get_mut(emb.norm.gain) = Tensor::full(&[4], 1.0);
        let img = ImageSize { w: 100, h: 100 };
        let out = embed_one(&store, &emb, &region(&mut Prng::new(1), 3), img);
        let want = layer_norm(&bias, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-12).unwrap();
        assert_eq!(out.shape(), &[1, 4]);
        assert!(out.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn region_embedding_hand_chain() {
        // D = 2, hidden widths 2: fc_feat = I, fc_loc picks (x1, y1), fc_out sums halves.
        let mut store = ParamStore::<f64>::default();
        let emb = ImageEmbedder::new(&mut store, &mut Init::new(0), 2, 2, 2, 2);
        *store.get_mut(emb.fc_feat.w) = Tensor::identity(2);
        let mut loc = Tensor::zeros(&[7, 2]);
        loc.data_mut()[0] = 1.0; // x1 -> col 0
        loc.data_mut()[3] = 1.0; // y1 -> col 1
        *store.get_mut(emb.fc_loc.w) = loc;
        *store.get_mut(emb.fc_out.w) =
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = Region { feat: vec![1.0, 3.0], bbox: bx(50.0, 0.0, 60.0, 10.0), score: 1.0 };
        let out = embed_one(&store, &emb, &r, ImageSize { w: 100, h: 100 });
        // pre-norm: [1 + 0.5, 3 + 0] = [1.5, 3]; mean 2.25, std 0.75 -> [-1, 1]
        assert!((out.data()[0] + 1.0).abs() < 1e-9 && (out.data()[1] - 1.0).abs() < 1e-9);

        let wrong = Region { feat: vec![1.0], ..r };
        let mut tape = Tape::new();
        assert!(emb.forward(&mut tape, &store, &[&wrong], ImageSize { w: 100, h: 100 }).is_err());
    }

    #[test]
    fn image_sequence_layout_and_equivariance() {
        let mut store = ParamStore::<f64>::default();
        let emb = ImageEmbedder::new(&mut store, &mut Init::with_std(2, 0.5), 4, 3, 3, 5);
        let img = ImageSize { w: 100, h: 100 };
        let mut rng = Prng::new(8);
        let contexts: Vec<Region> = (0..4).map(|_| region(&mut rng, 4)).collect();
        let run = |ctx: &[Region], target: &Region| {
            let mut tape = Tape::new();
            let v = assemble_image_embedding(&mut tape, &store, &emb, target, ctx, img).unwrap();
            tape.value(v).clone()
        };
        let base = run(&contexts, &contexts[2]);
        assert_eq!(base.shape(), &[5, 5]);
        assert_eq!(base.row(0), base.row(3));

        let mut swapped = contexts.clone();
        swapped.swap(1, 2);
        let perm = run(&swapped, &contexts[2]);
        assert_eq!(perm.row(0), base.row(0));
        assert_eq!(perm.row(1), base.row(1));
        assert_eq!(perm.row(2), base.row(3));
        assert_eq!(perm.row(3), base.row(2));
        assert_eq!(perm.row(4), base.row(4));

        let stranger = region(&mut rng, 4);
        let mut tape = Tape::new();
        assert!(assemble_image_embedding(&mut tape, &store, &emb, &stranger, &contexts, img).is_err());
    }
}
