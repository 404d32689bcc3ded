use autodiff::{Graph, Var};

use super::lstm::{BiLstm, Encoded, RecurrentDropout};
use crate::corpus::AnswerSpan;
use crate::error::{Error, Result};

/// Runs the aggregation BiLSTM over the document annotation rows inside
/// each span and returns `[h'_fwd; h'_bwd; h^d at span end]`, one row per
/// batch entry.
pub fn answer_condition_encode(
    g: &mut Graph,
    doc: &Encoded,
    spans: &[AnswerSpan],
    agg: &BiLstm,
) -> Result<Var> {
    let b = doc.batch();
    if spans.len() != b {
        return Err(Error::Index(format!("{} spans for a batch of {b}", spans.len())));
    }
    for (r, s) in spans.iter().enumerate() {
        if !s.within(doc.lengths[r]) {
            return Err(Error::Index(format!(
                "span {}..={} outside document of length {}",
                s.start, s.end, doc.lengths[r]
            )));
        }
    }
    let lengths: Vec<usize> = spans.iter().map(AnswerSpan::len).collect();
    let steps = lengths.iter().copied().max().unwrap_or(0);
    let mut idx = Vec::with_capacity(steps * b);
    for t in 0..steps {
        for (r, s) in spans.iter().enumerate() {
            let pos = (s.start + t).min(s.end);
            idx.push(pos * b + r);
        }
    }
    let x = g.select_rows(doc.annotations, &idx)?;
    let none = RecurrentDropout::none();
    let enc = agg.encode(g, x, &lengths, &none, &none)?;
    let fin = enc.final_state(g)?;
    let ends: Vec<usize> = spans.iter().map(|s| s.end).collect();
    let at_end = doc.rows_at(g, &ends)?;
    Ok(g.concat_cols(&[fin, at_end])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_loss as check_gradients;
    use autodiff::{GradCheckOptions, ParamStore, RngStream, Tensor};

    fn doc_fixture(rng: &mut RngStream) -> (ParamStore, BiLstm, BiLstm, autodiff::ParamId) {
        let mut ps = ParamStore::new();
        let enc = BiLstm::new(&mut ps, "doc", 3, 2, rng);
        let agg = BiLstm::new(&mut ps, "agg", 4, 2, rng);
        let x = ps.add_uniform("x", 5, 3, 1.0, rng);
        (ps, enc, agg, x)
    }

    fn encode(ps: &ParamStore, enc: &BiLstm, agg: &BiLstm, x: autodiff::ParamId, span: AnswerSpan) -> Tensor {
        let mut g = Graph::new(ps);
        let xv = g.param(x);
        let none = RecurrentDropout::none();
        let d = enc.encode(&mut g, xv, &[5], &none, &none).unwrap();
        let a = answer_condition_encode(&mut g, &d, &[span], agg).unwrap();
        g.value(a).clone()
    }

    #[test]
    fn single_token_span_aggregates_one_row() {
        let mut rng = RngStream::new(1);
        let (ps, enc, agg, x) = doc_fixture(&mut rng);
        let a = encode(&ps, &enc, &agg, x, AnswerSpan::new(2, 2));
        assert_eq!(a.shape(), (1, 8));
        let mut g = Graph::new(&ps);
        let xv = g.param(x);
        let none = RecurrentDropout::none();
        let d = enc.encode(&mut g, xv, &[5], &none, &none).unwrap();
        let row = d.rows_at(&mut g, &[2]).unwrap();
        let z = g.zeros(1, 2);
        let (hf, _) = agg.fwd.step(&mut g, row, z, z).unwrap();
        let (hb, _) = agg.bwd.step(&mut g, row, z, z).unwrap();
        let want: Vec<f64> = [g.value(hf).data(), g.value(hb).data(), g.value(row).data()].concat();
        for (u, v) in a.data().iter().zip(&want) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn different_spans_give_different_encodings() {
        let mut rng = RngStream::new(2);
        for _ in 0..20 {
            let (ps, enc, agg, x) = doc_fixture(&mut rng);
            let a = encode(&ps, &enc, &agg, x, AnswerSpan::new(0, 1));
            let b = encode(&ps, &enc, &agg, x, AnswerSpan::new(1, 3));
            assert!(a.data().iter().zip(b.data()).any(|(u, v)| (u - v).abs() > 1e-9));
        }
    }

    #[test]
    fn span_out_of_range_is_index_error() {
        let mut rng = RngStream::new(3);
        let (ps, enc, agg, x) = doc_fixture(&mut rng);
        let mut g = Graph::new(&ps);
        let xv = g.param(x);
        let none = RecurrentDropout::none();
        let d = enc.encode(&mut g, xv, &[5], &none, &none).unwrap();
        let err = answer_condition_encode(&mut g, &d, &[AnswerSpan::new(3, 5)], &agg).unwrap_err();
        assert!(matches!(err, Error::Index(_)));
    }

    #[test]
    fn gradient_reaches_only_span_inputs_through_selected_rows() {
        let mut rng = RngStream::new(4);
        let mut ps = ParamStore::new();
        let agg = BiLstm::new(&mut ps, "agg", 3, 2, &mut rng);
        let h = ps.add_uniform("h", 5, 3, 1.0, &mut rng);
        let build = |_: &ParamStore, g: &mut Graph<'_>| {
            let hv = g.param(h);
            let doc = Encoded {
                annotations: hv,
                final_fwd: hv,
                final_bwd: hv,
                lengths: vec![5],
                steps: 5,
            };
            let a = answer_condition_encode(g, &doc, &[AnswerSpan::new(1, 2)], &agg)?;
            let sq = g.mul(a, a)?;
            Ok(g.sum(sq))
        };
        let report = check_gradients(&mut ps, build, GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        let mut g = Graph::new(&ps);
        let l = build(&ps, &mut g).unwrap();
        let grads = g.backward(l).unwrap().into_param_grads();
        let gh = grads.get(h).unwrap();
        for r in [0, 3, 4] {
            assert!(gh.row(r).iter().all(|&v| v == 0.0));
        }
        assert!(gh.row(1).iter().any(|&v| v != 0.0));
    }
}
