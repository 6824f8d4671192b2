//! A single flow sample can be fitted almost exactly.

use protoformer::encoder::{EncoderConfig, Head, Input, Model};
use protoformer::tasks::train::sample_gradient;
use protoformer::tasks::{epe, gen_flow_sample, AdamW, Sample};

#[test]
fn single_flow_sample_overfits() {
    let sample = gen_flow_sample(11, 32, 32, 3).unwrap();
    let mut model = Model::new(EncoderConfig::new(Head::Flow), 5).unwrap();
    let error = |m: &Model| {
        let pred = m
            .forward(Input::Flow { frame1: &sample.frame1, frame2: &sample.frame2 })
            .unwrap();
        epe(&pred.field, &sample.flow.reshape(&[32 * 32, 2]).unwrap()).unwrap()
    };
    let initial = error(&model);
    let wrapped = Sample::Flow(sample.clone());
    let mut opt = AdamW::new(2e-3, 0.0);
    for _ in 0..200 {
        let (_, grads) = sample_gradient(&model, &wrapped).unwrap();
        opt.step(model.store_mut(), &grads).unwrap();
    }
    let last = error(&model);
    assert!(last < 0.1 * initial, "EPE {initial} -> {last}");
}
