//! Dense N-C-H-W tensors and channel-slice views.
//!
//! Channel concatenation in N-C-H-W order is a write into a contiguous run
//! of channels, so two producers can fill disjoint channel ranges of one
//! buffer through [`ChannelSliceView`]s and no concat kernel ever runs.
//!
//! Every tensor buffer created through this module bumps a per-thread
//! allocation tally (see [`allocation_count`]). Views never touch it.

use std::cell::Cell;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static ALLOCATIONS: Cell<u64> = const { Cell::new(0) };
}

fn bump_tally() {
    ALLOCATIONS.with(|c| c.set(c.get() + 1));
}

/// Number of tensor buffers created on the current thread so far.
///
/// Take the difference of two readings around a piece of work to count the
/// buffers it allocated.
pub fn allocation_count() -> u64 {
    ALLOCATIONS.with(Cell::get)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    U8,
    I32,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U8 => 1,
        }
    }
}

/// Extents of a 4-D tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape { n, c, h, w };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Size(format!("zero extent in {self}")));
        }
        self.checked_numel()
            .ok_or_else(|| Error::Size(format!("element count of {self} overflows")))?;
        Ok(())
    }

    fn checked_numel(&self) -> Option<usize> {
        self.n.checked_mul(self.c)?.checked_mul(self.h)?.checked_mul(self.w)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one channel plane (`h * w`).
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    fn check_index(&self, idx: [usize; 4]) -> Result<()> {
        let dims = self.dims();
        if idx.iter().zip(dims.iter()).any(|(i, d)| i >= d) {
            return Err(Error::Bounds(format!("index {idx:?} outside {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl TensorData {
    fn zeros(dtype: DType, len: usize) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(vec![0.0; len]),
            DType::U8 => TensorData::U8(vec![0; len]),
            DType::I32 => TensorData::I32(vec![0; len]),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
            TensorData::I32(_) => DType::I32,
        }
    }

    fn capacity(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }
}

mod sealed {
    pub trait Sealed {}
    impl Sealed for f32 {}
    impl Sealed for u8 {}
    impl Sealed for i32 {}
}

/// Scalar types a tensor can hold.
pub trait Element: Copy + Default + PartialOrd + Send + Sync + 'static + sealed::Sealed {
    const DTYPE: DType;

    #[doc(hidden)]
    fn storage(data: &TensorData) -> Option<&[Self]>;
    #[doc(hidden)]
    fn storage_mut(data: &mut TensorData) -> Option<&mut [Self]>;
    #[doc(hidden)]
    fn wrap(v: Vec<Self>) -> TensorData;
}

macro_rules! impl_element {
    ($ty:ty, $variant:ident) => {
        impl Element for $ty {
            const DTYPE: DType = DType::$variant;

            fn storage(data: &TensorData) -> Option<&[Self]> {
                match data {
                    TensorData::$variant(v) => Some(v),
                    _ => None,
                }
            }

            fn storage_mut(data: &mut TensorData) -> Option<&mut [Self]> {
                match data {
                    TensorData::$variant(v) => Some(v),
                    _ => None,
                }
            }

            fn wrap(v: Vec<Self>) -> TensorData {
                TensorData::$variant(v)
            }
        }
    };
}

impl_element!(f32, F32);
impl_element!(u8, U8);
impl_element!(i32, I32);

/// A dense tensor in N-C-H-W order.
///
/// The backing buffer may be larger than the logical shape: execution
/// arenas are allocated once at their peak size and reshaped per layer with
/// [`Tensor::set_shape`].
#[derive(Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: TensorData,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        bump_tally();
        Tensor {
            shape: self.shape,
            data: self.data.clone(),
        }
    }
}

impl Tensor {
    /// Zero-initialized tensor.
    pub fn new(shape: Shape, dtype: DType) -> Result<Self> {
        shape.validate()?;
        Self::with_capacity(shape, dtype, shape.numel())
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::new(shape, DType::F32)
    }

    /// Zero-initialized tensor whose buffer holds `capacity` elements, at
    /// least `shape.numel()`.
    pub fn with_capacity(shape: Shape, dtype: DType, capacity: usize) -> Result<Self> {
        shape.validate()?;
        if capacity < shape.numel() {
            return Err(Error::Size(format!(
                "capacity {capacity} below element count of {shape}"
            )));
        }
        bump_tally();
        Ok(Tensor {
            shape,
            data: TensorData::zeros(dtype, capacity),
        })
    }

    pub fn from_vec<T: Element>(shape: Shape, values: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if values.len() != shape.numel() {
            return Err(Error::Size(format!(
                "{} values supplied for shape {shape}",
                values.len()
            )));
        }
        bump_tally();
        Ok(Tensor {
            shape,
            data: T::wrap(values),
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    /// Element offset between consecutive channels.
    pub fn stride_c(&self) -> usize {
        self.shape.plane()
    }

    pub fn capacity(&self) -> usize {
        self.data.capacity()
    }

    /// Reinterpret the buffer with a new logical shape. No allocation; the
    /// new element count must fit the existing buffer.
    pub fn set_shape(&mut self, shape: Shape) -> Result<()> {
        shape.validate()?;
        if shape.numel() > self.capacity() {
            return Err(Error::Size(format!(
                "shape {shape} exceeds buffer capacity {}",
                self.capacity()
            )));
        }
        self.shape = shape;
        Ok(())
    }

    pub fn data<T: Element>(&self) -> Result<&[T]> {
        let n = self.numel();
        T::storage(&self.data).map(|s| &s[..n]).ok_or(Error::DType {
            expected: T::DTYPE,
            found: self.dtype(),
        })
    }

    pub fn data_mut<T: Element>(&mut self) -> Result<&mut [T]> {
        let n = self.numel();
        let found = self.dtype();
        T::storage_mut(&mut self.data).map(|s| &mut s[..n]).ok_or(Error::DType {
            expected: T::DTYPE,
            found,
        })
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        self.data()
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        self.data_mut()
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        self.data()
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        self.data()
    }

    /// Linear offset of `(n, c, h, w)`.
    pub fn offset(&self, idx: [usize; 4]) -> Result<usize> {
        self.shape.check_index(idx)?;
        let [n, c, h, w] = idx;
        let stride_c = self.stride_c();
        Ok(n * self.shape.c * stride_c + c * stride_c + h * self.shape.w + w)
    }

    pub fn get<T: Element>(&self, idx: [usize; 4]) -> Result<T> {
        let off = self.offset(idx)?;
        Ok(self.data::<T>()?[off])
    }

    pub fn set<T: Element>(&mut self, idx: [usize; 4], value: T) -> Result<()> {
        let off = self.offset(idx)?;
        self.data_mut::<T>()?[off] = value;
        Ok(())
    }

    /// Mutable view of channels `[offset, offset + count)`.
    pub fn slice_channels(&mut self, offset: usize, count: usize) -> Result<ChannelSliceView<'_>> {
        let c = self.shape.c;
        if count == 0 || offset.checked_add(count).map_or(true, |end| end > c) {
            return Err(Error::Bounds(format!(
                "channel slice [{offset}, {offset}+{count}) outside {c} channels"
            )));
        }
        Ok(ChannelSliceView {
            parent: self,
            offset,
            count,
        })
    }

    /// View covering every channel.
    pub fn view_mut(&mut self) -> ChannelSliceView<'_> {
        let count = self.shape.c;
        ChannelSliceView {
            parent: self,
            offset: 0,
            count,
        }
    }
}

/// A writable window onto a contiguous channel range of a parent tensor.
///
/// Channel `c` of the view is channel `offset + c` of the parent; writes
/// never reach channels outside the range.
#[derive(Debug)]
pub struct ChannelSliceView<'a> {
    parent: &'a mut Tensor,
    offset: usize,
    count: usize,
}

impl<'a> ChannelSliceView<'a> {
    /// Logical shape of the view: the parent's shape with `c = count`.
    pub fn shape(&self) -> Shape {
        self.parent.shape.with_channels(self.count)
    }

    pub fn channel_offset(&self) -> usize {
        self.offset
    }

    pub fn channel_count(&self) -> usize {
        self.count
    }

    pub fn dtype(&self) -> DType {
        self.parent.dtype()
    }

    pub fn stride_c(&self) -> usize {
        self.parent.stride_c()
    }

    fn parent_index(&self, idx: [usize; 4]) -> Result<[usize; 4]> {
        self.shape().check_index(idx)?;
        let [n, c, h, w] = idx;
        Ok([n, self.offset + c, h, w])
    }

    pub fn get<T: Element>(&self, idx: [usize; 4]) -> Result<T> {
        self.parent.get(self.parent_index(idx)?)
    }

    pub fn set<T: Element>(&mut self, idx: [usize; 4], value: T) -> Result<()> {
        let idx = self.parent_index(idx)?;
        self.parent.set(idx, value)
    }

    fn batch_range(&self, n: usize) -> Result<std::ops::Range<usize>> {
        if n >= self.parent.shape.n {
            return Err(Error::Bounds(format!("batch {n} outside {}", self.parent.shape)));
        }
        let stride_c = self.stride_c();
        let start = (n * self.parent.shape.c + self.offset) * stride_c;
        Ok(start..start + self.count * stride_c)
    }

    /// The view's channels of batch item `n`, as one contiguous slice.
    pub fn batch<T: Element>(&self, n: usize) -> Result<&[T]> {
        let range = self.batch_range(n)?;
        Ok(&self.parent.data::<T>()?[range])
    }

    pub fn batch_mut<T: Element>(&mut self, n: usize) -> Result<&mut [T]> {
        let range = self.batch_range(n)?;
        Ok(&mut self.parent.data_mut::<T>()?[range])
    }
}
