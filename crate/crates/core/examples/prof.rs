use std::time::Instant;
use gmetro_core::eval::{evaluate_environments, Metric};
use gmetro_core::graph::{split_nodes, DatasetSplit, PoolMode, TaskKind};
use gmetro_core::model::{
    AggregationMode, BatchGraph, ExpertMode, MoEConfig, MoEModel, TrainedModel,
};
use gmetro_core::nn::layers::EncoderConfig;
use gmetro_core::nn::Activation;
use gmetro_core::synth::{generate_sbm, SbmConfig};
use gmetro_core::transforms::TransformSet;

fn main() {
    let g = generate_sbm(
        &SbmConfig {
            num_nodes: 1000,
            num_communities: 4,
            p_intra: 0.05,
            p_inter: 0.005,
            feature_dim: 8,
            separation: 1.0,
            noise: 0.6,
        },
        17,
    )
    .unwrap();
    let split = split_nodes(g, (0.6, 0.2, 0.2), 17).unwrap();
    let set = TransformSet::default_synthetic();
    let config = MoEConfig {
        task_kind: TaskKind::Node,
        feature_dim: 8,
        num_classes: 4,
        encoder: EncoderConfig {
            layers: 3,
            hidden_dim: 32,
            activation: Activation::Relu,
            dropout: 0.0,
        },
        expert_mode: ExpertMode::SharedEncoderWithHeads,
        aggregation: AggregationMode::SoftmaxSum,
        pooling: PoolMode::Mean,
    };
    let moe = MoEModel::new(config, &set, 0).unwrap();
    let model = TrainedModel::Moe(moe);
    let DatasetSplit::NodeGraph { graph } = &split else {
        unreachable!()
    };
    let m = match &model {
        TrainedModel::Moe(m) => m,
        _ => unreachable!(),
    };
    for _ in 0..3 {
        let t = Instant::now();
        let out = m.logits_batch(&BatchGraph::single(graph).unwrap()).unwrap();
        println!("moe logits_batch: {:?} ({:?})", t.elapsed(), out.dim());
    }
    let envs = set.enumerate_environments(2).unwrap();
    let t = Instant::now();
    let res = evaluate_environments(&model, &split, &envs, Metric::Accuracy, &[101]).unwrap();
    println!(
        "evaluate 14 envs x 1 seed: {:?} ({} results)",
        t.elapsed(),
        res.len()
    );
}
