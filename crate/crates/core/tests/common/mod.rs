//! Reference implementations shared by integration tests.

use segdec::ops::Conv2dSpec;
use segdec::Tensor;

/// Direct summation with explicit bounds checks.
pub fn naive_conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, s: &Conv2dSpec) -> Vec<f64> {
    let [b, cin, h, wd] = x.dims4().unwrap();
    let (kh, kw) = s.kernel;
    let (ho, wo) = s.out_hw(h, wd).unwrap();
    let cin_g = cin / s.groups;
    let cout_g = s.out_ch / s.groups;
    let mut out = vec![0.0; b * s.out_ch * ho * wo];
    for n in 0..b {
        for o in 0..s.out_ch {
            let g = o / cout_g;
            for y in 0..ho {
                for xq in 0..wo {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * s.stride + i * s.dilation) as isize - s.padding.0 as isize;
                                let ix = (xq * s.stride + j * s.dilation) as isize - s.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at([o, ci, i, j]) * x.at([n, c, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out[((n * s.out_ch + o) * ho + y) * wo + xq] = acc;
                }
            }
        }
    }
    out
}
