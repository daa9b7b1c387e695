//! Layer stacks: spatial (NCHW) and dense pipelines, plus residual blocks.

use ndarray::{Array2, Array4};

use super::conv::MaxPool2d;
use super::{join, BatchNorm1d, BatchNorm2d, BufferFn, Conv2d, Linear, ParamFn, StateFn};

/// One stage of a spatial pipeline.
pub enum SpatialLayer {
    Conv(Conv2d),
    Norm(BatchNorm2d),
    Relu(ReluMap),
    Pool(MaxPool2d),
    Residual(Box<ResidualBlock>),
}

/// ReLU over feature maps; caches its output for the backward mask.
#[derive(Default)]
pub struct ReluMap {
    cache: Option<Array4<f32>>,
}

impl ReluMap {
    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let y = x.mapv(|v| v.max(0.0));
        if train {
            self.cache = Some(y.clone());
        }
        y
    }

    fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let y = self.cache.take().expect("relu backward without forward");
        let mut dx = dy.clone();
        dx.zip_mut_with(&y, |d, &yv| {
            if yv <= 0.0 {
                *d = 0.0;
            }
        });
        dx
    }
}

impl SpatialLayer {
    pub fn relu() -> Self {
        SpatialLayer::Relu(ReluMap::default())
    }

    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        match self {
            SpatialLayer::Conv(l) => l.forward(x, train),
            SpatialLayer::Norm(l) => l.forward(x, train),
            SpatialLayer::Relu(l) => l.forward(x, train),
            SpatialLayer::Pool(l) => l.forward(x, train),
            SpatialLayer::Residual(l) => l.forward(x, train),
        }
    }

    fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        match self {
            SpatialLayer::Conv(l) => l.backward(dy),
            SpatialLayer::Norm(l) => l.backward(dy),
            SpatialLayer::Relu(l) => l.backward(dy),
            SpatialLayer::Pool(l) => l.backward(dy),
            SpatialLayer::Residual(l) => l.backward(dy),
        }
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        match self {
            SpatialLayer::Conv(l) => l.visit_params(prefix, f),
            SpatialLayer::Norm(l) => l.visit_params(prefix, f),
            SpatialLayer::Relu(_) | SpatialLayer::Pool(_) => {}
            SpatialLayer::Residual(l) => l.visit_params(prefix, f),
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        match self {
            SpatialLayer::Norm(l) => l.visit_buffers(prefix, f),
            SpatialLayer::Residual(l) => l.visit_buffers(prefix, f),
            _ => {}
        }
    }

    fn visit_state(&self, prefix: &str, f: &mut StateFn) {
        match self {
            SpatialLayer::Conv(l) => l.visit_state(prefix, f),
            SpatialLayer::Norm(l) => l.visit_state(prefix, f),
            SpatialLayer::Relu(_) | SpatialLayer::Pool(_) => {}
            SpatialLayer::Residual(l) => l.visit_state(prefix, f),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            SpatialLayer::Conv(l) => l.param_count(),
            SpatialLayer::Norm(l) => l.param_count(),
            SpatialLayer::Relu(_) | SpatialLayer::Pool(_) => 0,
            SpatialLayer::Residual(l) => l.param_count(),
        }
    }
}

/// How a residual block routes its skip connection.
pub enum Shortcut {
    /// Adds the block input unchanged.
    Identity,
    /// Projects the block input (post-activation style downsampling).
    ProjectInput(Vec<SpatialLayer>),
    /// Projects the shared pre-activation output (pre-activation style).
    ProjectPre(Vec<SpatialLayer>),
}

/// Residual block: `y = [relu](main(pre(x)) + shortcut)`.
pub struct ResidualBlock {
    pre: Vec<SpatialLayer>,
    main: Vec<SpatialLayer>,
    shortcut: Shortcut,
    final_relu: Option<ReluMap>,
}

impl ResidualBlock {
    pub fn new(
        pre: Vec<SpatialLayer>,
        main: Vec<SpatialLayer>,
        shortcut: Shortcut,
        final_relu: bool,
    ) -> Self {
        Self {
            pre,
            main,
            shortcut,
            final_relu: final_relu.then(ReluMap::default),
        }
    }

    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let a = self
            .pre
            .iter_mut()
            .fold(x.clone(), |t, l| l.forward(&t, train));
        let m = self
            .main
            .iter_mut()
            .fold(a.clone(), |t, l| l.forward(&t, train));
        let s = match &mut self.shortcut {
            Shortcut::Identity => x.clone(),
            Shortcut::ProjectInput(p) => p.iter_mut().fold(x.clone(), |t, l| l.forward(&t, train)),
            Shortcut::ProjectPre(p) => p.iter_mut().fold(a, |t, l| l.forward(&t, train)),
        };
        let y = m + s;
        match self.final_relu.as_mut() {
            Some(r) => r.forward(&y, train),
            None => y,
        }
    }

    fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let d = match self.final_relu.as_mut() {
            Some(r) => r.backward(dy),
            None => dy.clone(),
        };
        let mut da = self.main.iter_mut().rev().fold(d.clone(), |t, l| l.backward(&t));
        let mut dx_direct: Option<Array4<f32>> = None;
        match &mut self.shortcut {
            Shortcut::Identity => dx_direct = Some(d),
            Shortcut::ProjectInput(p) => {
                dx_direct = Some(p.iter_mut().rev().fold(d, |t, l| l.backward(&t)));
            }
            Shortcut::ProjectPre(p) => {
                da += &p.iter_mut().rev().fold(d, |t, l| l.backward(&t));
            }
        }
        let mut dx = self.pre.iter_mut().rev().fold(da, |t, l| l.backward(&t));
        if let Some(ds) = dx_direct {
            dx += &ds;
        }
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        for (i, l) in self.pre.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &format!("pre.{i}")), f);
        }
        for (i, l) in self.main.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &format!("main.{i}")), f);
        }
        if let Shortcut::ProjectInput(p) | Shortcut::ProjectPre(p) = &mut self.shortcut {
            for (i, l) in p.iter_mut().enumerate() {
                l.visit_params(&join(prefix, &format!("shortcut.{i}")), f);
            }
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        for (i, l) in self.pre.iter_mut().enumerate() {
            l.visit_buffers(&join(prefix, &format!("pre.{i}")), f);
        }
        for (i, l) in self.main.iter_mut().enumerate() {
            l.visit_buffers(&join(prefix, &format!("main.{i}")), f);
        }
        if let Shortcut::ProjectInput(p) | Shortcut::ProjectPre(p) = &mut self.shortcut {
            for (i, l) in p.iter_mut().enumerate() {
                l.visit_buffers(&join(prefix, &format!("shortcut.{i}")), f);
            }
        }
    }

    fn visit_state(&self, prefix: &str, f: &mut StateFn) {
        for (i, l) in self.pre.iter().enumerate() {
            l.visit_state(&join(prefix, &format!("pre.{i}")), f);
        }
        for (i, l) in self.main.iter().enumerate() {
            l.visit_state(&join(prefix, &format!("main.{i}")), f);
        }
        if let Shortcut::ProjectInput(p) | Shortcut::ProjectPre(p) = &self.shortcut {
            for (i, l) in p.iter().enumerate() {
                l.visit_state(&join(prefix, &format!("shortcut.{i}")), f);
            }
        }
    }

    fn param_count(&self) -> usize {
        let short = match &self.shortcut {
            Shortcut::Identity => 0,
            Shortcut::ProjectInput(p) | Shortcut::ProjectPre(p) => {
                p.iter().map(SpatialLayer::param_count).sum()
            }
        };
        self.pre.iter().map(SpatialLayer::param_count).sum::<usize>()
            + self.main.iter().map(SpatialLayer::param_count).sum::<usize>()
            + short
    }
}

/// A spatial pipeline, NCHW in, NCHW out.
pub struct ConvNet {
    pub layers: Vec<SpatialLayer>,
}

impl ConvNet {
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        self.layers
            .iter_mut()
            .fold(x.clone(), |t, l| l.forward(&t, train))
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        self.layers
            .iter_mut()
            .rev()
            .fold(dy.clone(), |t, l| l.backward(&t))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_buffers(&join(prefix, &i.to_string()), f);
        }
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_state(&join(prefix, &i.to_string()), f);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(SpatialLayer::param_count).sum()
    }
}

/// One stage of a dense pipeline.
pub enum DenseLayer {
    Linear(Linear),
    Norm(BatchNorm1d),
    Relu(ReluVec),
}

/// ReLU over feature batches.
#[derive(Default)]
pub struct ReluVec {
    cache: Option<Array2<f32>>,
}

impl ReluVec {
    fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let y = x.mapv(|v| v.max(0.0));
        if train {
            self.cache = Some(y.clone());
        }
        y
    }

    fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let y = self.cache.take().expect("relu backward without forward");
        let mut dx = dy.clone();
        dx.zip_mut_with(&y, |d, &yv| {
            if yv <= 0.0 {
                *d = 0.0;
            }
        });
        dx
    }
}

impl DenseLayer {
    pub fn relu() -> Self {
        DenseLayer::Relu(ReluVec::default())
    }
}

/// A dense pipeline, (N, F_in) in, (N, F_out) out.
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        self.layers.iter_mut().fold(x.clone(), |t, l| match l {
            DenseLayer::Linear(lin) => lin.forward(&t, train),
            DenseLayer::Norm(n) => n.forward(&t, train),
            DenseLayer::Relu(r) => r.forward(&t, train),
        })
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        self.layers.iter_mut().rev().fold(dy.clone(), |t, l| match l {
            DenseLayer::Linear(lin) => lin.backward(&t),
            DenseLayer::Norm(n) => n.backward(&t),
            DenseLayer::Relu(r) => r.backward(&t),
        })
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &i.to_string());
            match l {
                DenseLayer::Linear(lin) => lin.visit_params(&p, f),
                DenseLayer::Norm(n) => n.visit_params(&p, f),
                DenseLayer::Relu(_) => {}
            }
        }
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let DenseLayer::Norm(n) = l {
                n.visit_buffers(&join(prefix, &i.to_string()), f);
            }
        }
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &i.to_string());
            match l {
                DenseLayer::Linear(lin) => lin.visit_state(&p, f),
                DenseLayer::Norm(n) => n.visit_state(&p, f),
                DenseLayer::Relu(_) => {}
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                DenseLayer::Linear(lin) => lin.param_count(),
                DenseLayer::Norm(n) => n.param_count(),
                DenseLayer::Relu(_) => 0,
            })
            .sum()
    }
}
