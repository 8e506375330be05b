//! Ablation grids over CEDNet-T: number of stages, per-stage block
//! allocation of two-stage models, and LR blocks on/off.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyzer::{count_flops, count_params, fusion_time_ratio};
use crate::build::build_cednet;
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::lab::{build_seg_model, evaluate, train, DataSpec, Split, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Stages,
    Allocation,
    LrBlock,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "stages" => Ok(Self::Stages),
            "allocation" => Ok(Self::Allocation),
            "lr-block" => Ok(Self::LrBlock),
            _ => Err(format!("unknown sweep axis `{s}` (expected stages, allocation or lr-block)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub config: ArchConfig,
}

fn point(label: impl Into<String>, config: ArchConfig) -> SweepPoint {
    SweepPoint { label: label.into(), config }
}

/// m = 1..4 with per-stage blocks shrunk as m grows.
pub fn stages_family() -> Vec<SweepPoint> {
    [(1, [6, 9, 3]), (2, [3, 6, 3]), (3, [2, 4, 2]), (4, [1, 4, 1])]
        .into_iter()
        .map(|(m, [n1, n2, n3])| {
            let mut c = ArchConfig::cednet_t();
            c.stages = m;
            c.blocks = [c.blocks[0], n1, n2, n3];
            point(format!("m={m}"), c)
        })
        .collect()
}

/// Two-stage allocations from "6/6" (everything in the first stage, no
/// second stage) to "1/6". The 6/6 row is a single stage.
pub fn allocation_family() -> Vec<SweepPoint> {
    let rows: [(&str, [usize; 3], Option<[usize; 3]>); 6] = [
        ("6/6", [6, 9, 3], None),
        ("5/6", [5, 10, 5], Some([1, 2, 1])),
        ("4/6", [4, 8, 4], Some([2, 4, 2])),
        ("3/6", [3, 6, 3], Some([3, 6, 3])),
        ("2/6", [2, 4, 2], Some([4, 8, 4])),
        ("1/6", [1, 2, 1], Some([5, 10, 5])),
    ];
    rows.into_iter()
        .map(|(label, first, second)| {
            let mut c = ArchConfig::cednet_t();
            let stages: Vec<[usize; 3]> = std::iter::once(first).chain(second).collect();
            c.stages = stages.len();
            c.blocks = [c.blocks[0], first[0], first[1], first[2]];
            c.per_stage_override = Some(stages);
            point(label, c)
        })
        .collect()
}

pub fn lr_block_family() -> Vec<SweepPoint> {
    [false, true]
        .into_iter()
        .map(|lr| {
            let mut c = ArchConfig::cednet_t();
            c.lr_blocks = lr;
            point(if lr { "lr" } else { "no-lr" }, c)
        })
        .collect()
}

pub fn family(axis: SweepAxis) -> Vec<SweepPoint> {
    match axis {
        SweepAxis::Stages => stages_family(),
        SweepAxis::Allocation => allocation_family(),
        SweepAxis::LrBlock => lr_block_family(),
    }
}

/// Optional toy training of every point. The point keeps its block layout
/// and stage count but runs at `channels` width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTraining {
    pub channels: [usize; 4],
    pub data: DataSpec,
    pub train: TrainConfig,
}

impl Default for SweepTraining {
    fn default() -> Self {
        Self { channels: [16, 32, 48, 64], data: DataSpec::default(), train: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub label: String,
    pub params: Option<u64>,
    pub flops: Option<u64>,
    pub fusion_time_ratio: Option<f64>,
    pub toy_miou: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    fn failed(index: usize, label: &str, e: &Error) -> Self {
        Self {
            index,
            label: label.into(),
            params: None,
            flops: None,
            fusion_time_ratio: None,
            toy_miou: None,
            error: Some(e.to_string()),
        }
    }
}

fn run_point(index: usize, p: &SweepPoint, input: (usize, usize), training: Option<&SweepTraining>) -> Result<SweepRow> {
    let g = build_cednet(&p.config)?;
    let mut row = SweepRow {
        index,
        label: p.label.clone(),
        params: Some(count_params(&g).total),
        flops: Some(count_flops(&g, input)?.macs),
        fusion_time_ratio: Some(fusion_time_ratio(&g)?),
        toy_miou: None,
        error: None,
    };
    if let Some(t) = training {
        let mut arch = p.config.clone();
        arch.channels = t.channels;
        let seg = build_seg_model(&arch, t.train.head_width)?;
        let (_, store) = train(&seg, &t.data, &t.train)?;
        row.toy_miou = Some(evaluate(&seg, &store, &t.data.scenes(Split::Val)?)?.miou);
    }
    Ok(row)
}

/// Runs every point on the current rayon pool. A failing point becomes a
/// row carrying its error; rows come back in point order.
pub fn run_sweep(points: &[SweepPoint], input: (usize, usize), training: Option<&SweepTraining>) -> Vec<SweepRow> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| run_point(i, p, input, training).unwrap_or_else(|e| SweepRow::failed(i, &p.label, &e)))
        .collect()
}

fn cell<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("index,label,params,flops,fusion_time_ratio,toy_miou,error\n");
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace('"', "'");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},\"{err}\"",
            r.index,
            r.label,
            cell(&r.params),
            cell(&r.flops),
            cell(&r.fusion_time_ratio),
            cell(&r.toy_miou)
        );
    }
    s
}
