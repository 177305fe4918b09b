use crate::error::{Error, Result};

/// How the elements of two operands line up with the output of a binary op.
#[derive(Clone, Debug)]
pub(crate) enum Layout {
    Same,
    /// The right operand's shape is a suffix of the left one's and repeats.
    RepeatRight(usize),
    /// The left operand's shape is a suffix of the right one's and repeats.
    RepeatLeft(usize),
    General { left: Vec<usize>, right: Vec<usize> },
}

#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    pub layout: Layout,
}

impl Broadcast {
    pub fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast {
                out_shape: a.to_vec(),
                layout: Layout::Same,
            });
        }
        if a.ends_with(b) {
            return Ok(Broadcast {
                out_shape: a.to_vec(),
                layout: Layout::RepeatRight(b.iter().product()),
            });
        }
        if b.ends_with(a) {
            return Ok(Broadcast {
                out_shape: b.to_vec(),
                layout: Layout::RepeatLeft(a.iter().product()),
            });
        }
        let out_shape = broadcast_shape(a, b)
            .ok_or_else(|| Error::dim(op, format!("shapes {a:?} and {b:?} do not broadcast")))?;
        Ok(Broadcast {
            layout: Layout::General {
                left: offsets(&out_shape, a),
                right: offsets(&out_shape, b),
            },
            out_shape,
        })
    }

    pub fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out, left, right)` for every output element in order.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        match &self.layout {
            Layout::Same => (0..n).for_each(|i| f(i, i, i)),
            Layout::RepeatRight(len) => {
                for row in 0..n / len {
                    let base = row * len;
                    for j in 0..*len {
                        f(base + j, base + j, j);
                    }
                }
            }
            Layout::RepeatLeft(len) => {
                for row in 0..n / len {
                    let base = row * len;
                    for j in 0..*len {
                        f(base + j, j, base + j);
                    }
                }
            }
            Layout::General { left, right } => {
                for i in 0..n {
                    f(i, left[i], right[i]);
                }
            }
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Flat offset into a tensor of shape `input` for every element of `out`,
/// where `input` broadcasts to `out`.
pub(crate) fn offsets(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..rank).rev() {
        let from_right = rank - 1 - i;
        let d = dim_from_right(input, from_right);
        if from_right < input.len() {
            strides[i] = if d == 1 { 0 } else { stride };
            stride *= d;
        }
    }
    let n: usize = out.iter().product();
    let mut result = Vec::with_capacity(n);
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        result.push(offset);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += strides[ax];
            if index[ax] < out[ax] {
                break;
            }
            offset -= strides[ax] * index[ax];
            index[ax] = 0;
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numpy_style_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 3]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn offsets_repeat_broadcast_axes() {
        assert_eq!(offsets(&[2, 3], &[1, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(offsets(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(offsets(&[2, 2, 2], &[2, 1, 2]), vec![0, 1, 0, 1, 2, 3, 2, 3]);
    }

    #[test]
    fn suffix_shapes_take_fast_path() {
        let plan = Broadcast::plan("t", &[4, 5, 3], &[3]).unwrap();
        assert!(matches!(plan.layout, Layout::RepeatRight(3)));
        let plan = Broadcast::plan("t", &[], &[2, 2]).unwrap();
        assert!(matches!(plan.layout, Layout::RepeatLeft(1)));
    }
}
