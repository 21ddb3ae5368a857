//! Naive scalar re-statement of the student objective over plain vectors.

pub struct Instance {
    /// n x d descriptors.
    pub x: Vec<Vec<f64>>,
    /// Head index per anchor, None = ignored.
    pub labels: Vec<Option<usize>>,
    /// (class slot, target deltas) for positive anchors.
    pub reg: Vec<Option<(usize, [f64; 4])>>,
    /// Teacher foreground probability per anchor.
    pub teacher_fg: Vec<f64>,
    pub lambdas: [f64; 3],
    pub eps: f64,
    pub normalize: bool,
    pub kd: bool,
    pub reg_weight: f64,
}

/// Parameters laid out as cls_w (4 x d), cls_b (4), reg_w (12 x d), reg_b (12).
pub fn objective(inst: &Instance, params: &[f64]) -> f64 {
    let d = inst.x[0].len();
    let cls_w = &params[..4 * d];
    let cls_b = &params[4 * d..4 * d + 4];
    let reg_w = &params[4 * d + 4..16 * d + 4];
    let reg_b = &params[16 * d + 4..];

    let mut probs = Vec::new();
    let mut ce = 0.0;
    let mut labeled = 0.0;
    let mut reg = 0.0;
    let mut pos = 0.0;
    for (i, x) in inst.x.iter().enumerate() {
        let z: Vec<f64> = (0..4).map(|k| cls_b[k] + (0..d).map(|j| cls_w[k * d + j] * x[j]).sum::<f64>()).collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let p: Vec<f64> = z.iter().map(|v| v.exp() / denom).collect();
        if let Some(y) = inst.labels[i] {
            ce -= p[y].ln();
            labeled += 1.0;
        }
        if let Some((c, t)) = inst.reg[i] {
            for k in 0..4 {
                let row = 4 * c + k;
                let pred = reg_b[row] + (0..d).map(|j| reg_w[row * d + j] * x[j]).sum::<f64>();
                let r = pred - t[k];
                reg += if r.abs() < 1.0 { 0.5 * r * r } else { r.abs() - 0.5 };
            }
            pos += 1.0;
        }
        probs.push(p);
    }
    let mut total = ce / labeled;
    if pos > 0.0 {
        total += inst.reg_weight * reg / pos;
    }
    if inst.kd {
        let tv: f64 = inst.teacher_fg.iter().sum();
        let mut num = 0.0;
        for c in 0..3 {
            let su: f64 = probs.iter().map(|p| p[c + 1]).sum();
            let mut bc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                let (u, v) = if inst.normalize { (p[c + 1] / su, inst.teacher_fg[i] / tv) } else { (p[c + 1], inst.teacher_fg[i]) };
                bc += (u * v).sqrt();
            }
            num += -inst.lambdas[c] * bc.max(inst.eps).ln();
        }
        total += num / inst.lambdas.iter().sum::<f64>();
    }
    total
}

/// Central finite differences of [`objective`].
pub fn numeric_gradient(inst: &Instance, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = objective(inst, &p);
            p[i] = orig - h;
            let down = objective(inst, &p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
