//! The five built-in benchmark kernels and the registry that makes kernels
//! selectable by id.
//!
//! A kernel bundles input generation ([`Kernel::prepare`]), the timed body
//! ([`KernelInstance::run`]), an untimed verifier and a bytes-per-iteration
//! rule. Every built-in kernel counts `n * element_size` bytes per call.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::backends::{Executor, Primitive};
use crate::datagen::{self, DataSpec};
use crate::element::{Element, ElementType, FloatElement};
use crate::error::{Error, Result};
use crate::placement::{Allocator, Buffer};

/// Everything needed to build one kernel instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceParams {
    pub n: usize,
    pub element: ElementType,
    pub seed: u64,
    pub allocator: Allocator,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verification {
    Pass,
    Fail(String),
}

impl Verification {
    pub fn passed(&self) -> bool {
        matches!(self, Self::Pass)
    }
}

/// The observable result of the last [`KernelInstance::run`], used to
/// compare backends against each other.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    NotRun,
    Index(Option<usize>),
    /// Checksum of an integer result (scalar or array), compared bit-exactly.
    Digest(u64),
    /// Floating-point output, compared with a relative tolerance.
    Values(Vec<f64>),
}

impl Outcome {
    /// Equality for exact outcomes; elementwise `|a-b| <= rel_tol * |b|` for
    /// float values.
    pub fn agrees_with(&self, reference: &Outcome, rel_tol: f64) -> bool {
        match (self, reference) {
            (Self::Values(a), Self::Values(b)) => {
                a.len() == b.len()
                    && a.iter()
                        .zip(b)
                        .all(|(x, y)| x == y || (x - y).abs() <= rel_tol * y.abs())
            }
            (Self::NotRun, _) | (_, Self::NotRun) => false,
            (a, b) => a == b,
        }
    }
}

pub trait Kernel: Send + Sync {
    fn id(&self) -> &str;

    /// The backend primitive the body depends on; used for capability checks.
    fn primitive(&self) -> Primitive;

    fn default_element(&self) -> ElementType;

    fn supports_element(&self, element: ElementType) -> bool;

    fn bytes_per_iteration(&self, n: usize, element_size: usize) -> u64 {
        n as u64 * element_size as u64
    }

    /// Arrays of `n` elements allocated besides the input.
    fn auxiliary_arrays(&self) -> usize {
        0
    }

    /// Generates the input (untimed).
    fn prepare(&self, exec: &Executor, params: &InstanceParams) -> Result<Box<dyn KernelInstance>>;
}

pub trait KernelInstance: Send {
    /// Per-repetition setup, run outside the timed region. `repetition`
    /// selects the random stream for targets and shuffles.
    fn refresh(&mut self, exec: &Executor, repetition: u64) -> Result<()>;

    /// The timed body.
    fn run(&mut self, exec: &Executor) -> Result<()>;

    fn verify(&self) -> Verification;

    fn outcome(&self) -> Outcome;
}

pub fn kernel_find<T: Element>(exec: &Executor, data: &[T], target: T) -> Result<Option<usize>> {
    exec.par_find(data, target)
}

pub fn kernel_for_each<F: FloatElement>(exec: &Executor, data: &mut [F]) -> Result<()> {
    exec.par_map(data, F::min_sin_tan)
}

pub fn kernel_inclusive_scan<T: Element>(
    exec: &Executor,
    input: &[T],
    output: &mut [T],
) -> Result<()> {
    exec.par_inclusive_scan(input, output)
}

pub fn kernel_reduce<T: Element>(exec: &Executor, data: &[T]) -> Result<T> {
    exec.par_reduce(data, T::zero(), T::combine)
}

pub fn kernel_sort<T: Element>(exec: &Executor, data: &mut [T]) -> Result<()> {
    exec.par_sort(data)
}

/// `n(n+1)/2` reduced to the element width.
pub fn triangular<T: Element>(n: u64) -> T {
    T::from_u64_wrapping(n * (n + 1) / 2)
}

fn unsupported_element(kernel: &str, element: ElementType) -> Error {
    Error::InvalidArgument(format!(
        "kernel `{kernel}` does not support {element} elements"
    ))
}

macro_rules! dispatch_int {
    ($kernel:expr, $params:expr, $build:ident) => {
        match $params.element {
            ElementType::Int32 => $build::<i32>,
            ElementType::Int64 => $build::<i64>,
            other => return Err(unsupported_element($kernel, other)),
        }
    };
}

fn increment<T: Element>(exec: &Executor, p: &InstanceParams) -> Result<Buffer<T>> {
    datagen::generate_increment(&DataSpec::increment(p.n, p.element), exec, p.allocator)
}

// find ---------------------------------------------------------------------

pub struct Find;

struct FindInstance<T: Element> {
    data: Buffer<T>,
    seed: u64,
    target: u64,
    result: Option<Option<usize>>,
}

fn find_instance<T: Element>(
    exec: &Executor,
    p: &InstanceParams,
) -> Result<Box<dyn KernelInstance>> {
    Ok(Box::new(FindInstance::<T> {
        data: increment(exec, p)?,
        seed: p.seed,
        target: datagen::draw_target(p.seed, 0, p.n),
        result: None,
    }))
}

impl Kernel for Find {
    fn id(&self) -> &str {
        "find"
    }
    fn primitive(&self) -> Primitive {
        Primitive::Find
    }
    fn default_element(&self) -> ElementType {
        ElementType::Int32
    }
    fn supports_element(&self, element: ElementType) -> bool {
        element.is_integer()
    }
    fn prepare(&self, exec: &Executor, params: &InstanceParams) -> Result<Box<dyn KernelInstance>> {
        dispatch_int!(self.id(), params, find_instance)(exec, params)
    }
}

impl<T: Element> KernelInstance for FindInstance<T> {
    fn refresh(&mut self, _exec: &Executor, repetition: u64) -> Result<()> {
        self.target = datagen::draw_target(self.seed, repetition, self.data.len());
        self.result = None;
        Ok(())
    }

    fn run(&mut self, exec: &Executor) -> Result<()> {
        let target = T::from_u64_wrapping(self.target);
        self.result = Some(kernel_find(exec, &self.data, target)?);
        Ok(())
    }

    fn verify(&self) -> Verification {
        let expected = self.target as usize - 1;
        match self.result {
            Some(Some(i)) if i == expected => Verification::Pass,
            Some(got) => Verification::Fail(format!(
                "find({}) returned {got:?}, expected index {expected}",
                self.target
            )),
            None => Verification::Fail("find was not run".into()),
        }
    }

    fn outcome(&self) -> Outcome {
        self.result.map_or(Outcome::NotRun, Outcome::Index)
    }
}

// for_each -----------------------------------------------------------------

pub struct ForEach;

struct ForEachInstance<F: FloatElement> {
    data: Buffer<F>,
    runs: u32,
}

fn for_each_instance<F: FloatElement>(
    exec: &Executor,
    p: &InstanceParams,
) -> Result<Box<dyn KernelInstance>> {
    Ok(Box::new(ForEachInstance::<F> {
        data: increment(exec, p)?,
        runs: 0,
    }))
}

impl Kernel for ForEach {
    fn id(&self) -> &str {
        "for_each"
    }
    fn primitive(&self) -> Primitive {
        Primitive::Map
    }
    fn default_element(&self) -> ElementType {
        ElementType::Float64
    }
    fn supports_element(&self, element: ElementType) -> bool {
        !element.is_integer()
    }
    fn prepare(&self, exec: &Executor, params: &InstanceParams) -> Result<Box<dyn KernelInstance>> {
        match params.element {
            ElementType::Float32 => for_each_instance::<f32>(exec, params),
            ElementType::Float64 => for_each_instance::<f64>(exec, params),
            other => Err(unsupported_element(self.id(), other)),
        }
    }
}

impl<F: FloatElement> KernelInstance for ForEachInstance<F> {
    // The map is applied in place and never restored: repeated application
    // costs the same, and the stored result keeps the work observable.
    fn refresh(&mut self, _exec: &Executor, _repetition: u64) -> Result<()> {
        Ok(())
    }

    fn run(&mut self, exec: &Executor) -> Result<()> {
        kernel_for_each(exec, &mut self.data)?;
        self.runs += 1;
        Ok(())
    }

    fn verify(&self) -> Verification {
        if self.runs == 0 {
            return Verification::Fail("for_each was not run".into());
        }
        for (i, &got) in self.data.iter().enumerate() {
            let mut want = F::from_u64_wrapping(i as u64 + 1);
            for _ in 0..self.runs {
                want = want.min_sin_tan();
            }
            if got.to_f64().to_bits() != want.to_f64().to_bits() {
                return Verification::Fail(format!("element {i}: got {got:?}, expected {want:?}"));
            }
        }
        Verification::Pass
    }

    fn outcome(&self) -> Outcome {
        if self.runs == 0 {
            Outcome::NotRun
        } else {
            Outcome::Values(self.data.iter().map(|x| x.to_f64()).collect())
        }
    }
}

// inclusive_scan -----------------------------------------------------------

pub struct InclusiveScan;

struct ScanInstance<T: Element> {
    input: Buffer<T>,
    output: Buffer<T>,
    ran: bool,
}

fn scan_instance<T: Element>(
    exec: &Executor,
    p: &InstanceParams,
) -> Result<Box<dyn KernelInstance>> {
    Ok(Box::new(ScanInstance::<T> {
        input: increment(exec, p)?,
        output: Buffer::from_fn(exec, p.allocator, p.n, |_| T::zero())?,
        ran: false,
    }))
}

impl Kernel for InclusiveScan {
    fn id(&self) -> &str {
        "inclusive_scan"
    }
    fn primitive(&self) -> Primitive {
        Primitive::Scan
    }
    fn default_element(&self) -> ElementType {
        ElementType::Int32
    }
    fn supports_element(&self, element: ElementType) -> bool {
        element.is_integer()
    }
    fn auxiliary_arrays(&self) -> usize {
        1
    }
    fn prepare(&self, exec: &Executor, params: &InstanceParams) -> Result<Box<dyn KernelInstance>> {
        dispatch_int!(self.id(), params, scan_instance)(exec, params)
    }
}

impl<T: Element> KernelInstance for ScanInstance<T> {
    fn refresh(&mut self, _exec: &Executor, _repetition: u64) -> Result<()> {
        Ok(())
    }

    fn run(&mut self, exec: &Executor) -> Result<()> {
        kernel_inclusive_scan(exec, &self.input, &mut self.output)?;
        self.ran = true;
        Ok(())
    }

    fn verify(&self) -> Verification {
        if !self.ran {
            return Verification::Fail("inclusive_scan was not run".into());
        }
        for (i, &got) in self.output.iter().enumerate() {
            let want = triangular::<T>(i as u64 + 1);
            if got != want {
                return Verification::Fail(format!("prefix {i}: got {got:?}, expected {want:?}"));
            }
        }
        Verification::Pass
    }

    fn outcome(&self) -> Outcome {
        if self.ran {
            Outcome::Digest(datagen::checksum(&self.output))
        } else {
            Outcome::NotRun
        }
    }
}

// reduce -------------------------------------------------------------------

pub struct Reduce;

struct ReduceInstance<T: Element> {
    data: Buffer<T>,
    result: Option<T>,
}

fn reduce_instance<T: Element>(
    exec: &Executor,
    p: &InstanceParams,
) -> Result<Box<dyn KernelInstance>> {
    Ok(Box::new(ReduceInstance::<T> {
        data: increment(exec, p)?,
        result: None,
    }))
}

impl Kernel for Reduce {
    fn id(&self) -> &str {
        "reduce"
    }
    fn primitive(&self) -> Primitive {
        Primitive::Reduce
    }
    fn default_element(&self) -> ElementType {
        ElementType::Int32
    }
    fn supports_element(&self, element: ElementType) -> bool {
        element.is_integer()
    }
    fn prepare(&self, exec: &Executor, params: &InstanceParams) -> Result<Box<dyn KernelInstance>> {
        dispatch_int!(self.id(), params, reduce_instance)(exec, params)
    }
}

impl<T: Element> KernelInstance for ReduceInstance<T> {
    fn refresh(&mut self, _exec: &Executor, _repetition: u64) -> Result<()> {
        Ok(())
    }

    fn run(&mut self, exec: &Executor) -> Result<()> {
        self.result = Some(kernel_reduce(exec, &self.data)?);
        Ok(())
    }

    fn verify(&self) -> Verification {
        let want = triangular::<T>(self.data.len() as u64);
        match self.result {
            Some(got) if got == want => Verification::Pass,
            Some(got) => Verification::Fail(format!("sum {got:?}, expected {want:?}")),
            None => Verification::Fail("reduce was not run".into()),
        }
    }

    fn outcome(&self) -> Outcome {
        self.result.map_or(Outcome::NotRun, |r| {
            Outcome::Digest(datagen::checksum(&[r]))
        })
    }
}

// sort ---------------------------------------------------------------------

pub struct Sort;

struct SortInstance<T: Element> {
    data: Buffer<T>,
    seed: u64,
    /// Stream the current contents were shuffled with; `None` once sorted.
    shuffled_with: Option<u64>,
    ran: bool,
}

fn sort_instance<T: Element>(
    exec: &Executor,
    p: &InstanceParams,
) -> Result<Box<dyn KernelInstance>> {
    let spec = DataSpec::shuffled(p.n, p.element, p.seed);
    Ok(Box::new(SortInstance::<T> {
        data: datagen::generate_shuffled(&spec, exec, p.allocator)?,
        seed: p.seed,
        shuffled_with: Some(0),
        ran: false,
    }))
}

impl Kernel for Sort {
    fn id(&self) -> &str {
        "sort"
    }
    fn primitive(&self) -> Primitive {
        Primitive::Sort
    }
    fn default_element(&self) -> ElementType {
        ElementType::Int32
    }
    fn supports_element(&self, element: ElementType) -> bool {
        element.is_integer()
    }
    fn prepare(&self, exec: &Executor, params: &InstanceParams) -> Result<Box<dyn KernelInstance>> {
        dispatch_int!(self.id(), params, sort_instance)(exec, params)
    }
}

impl<T: Element> KernelInstance for SortInstance<T> {
    /// Re-shuffles before every repetition so no timed call sees sorted input.
    fn refresh(&mut self, exec: &Executor, repetition: u64) -> Result<()> {
        if self.shuffled_with != Some(repetition) {
            datagen::reshuffle(exec, &mut self.data, self.seed, repetition)?;
            self.shuffled_with = Some(repetition);
        }
        self.ran = false;
        Ok(())
    }

    fn run(&mut self, exec: &Executor) -> Result<()> {
        kernel_sort(exec, &mut self.data)?;
        self.shuffled_with = None;
        self.ran = true;
        Ok(())
    }

    fn verify(&self) -> Verification {
        if !self.ran {
            return Verification::Fail("sort was not run".into());
        }
        for (i, &got) in self.data.iter().enumerate() {
            let want = T::from_u64_wrapping(i as u64 + 1);
            if got != want {
                return Verification::Fail(format!("position {i}: got {got:?}, expected {want:?}"));
            }
        }
        Verification::Pass
    }

    fn outcome(&self) -> Outcome {
        if self.ran {
            Outcome::Digest(datagen::checksum(&self.data))
        } else {
            Outcome::NotRun
        }
    }
}

// registry -----------------------------------------------------------------

pub const BUILTIN_KERNELS: [&str; 5] = ["find", "for_each", "inclusive_scan", "reduce", "sort"];

#[derive(Clone)]
pub struct KernelRegistry {
    kernels: BTreeMap<String, Arc<dyn Kernel>>,
}

impl Default for KernelRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl KernelRegistry {
    pub fn empty() -> Self {
        Self {
            kernels: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut registry = Self::empty();
        let builtins: [Arc<dyn Kernel>; 5] = [
            Arc::new(Find),
            Arc::new(ForEach),
            Arc::new(InclusiveScan),
            Arc::new(Reduce),
            Arc::new(Sort),
        ];
        for kernel in builtins {
            registry.register(kernel).expect("built-in ids are unique");
        }
        registry
    }

    pub fn register(&mut self, kernel: Arc<dyn Kernel>) -> Result<()> {
        let id = kernel.id().to_owned();
        if self.kernels.contains_key(&id) {
            return Err(Error::Registration(format!(
                "kernel `{id}` is already registered"
            )));
        }
        self.kernels.insert(id, kernel);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Arc<dyn Kernel>> {
        self.kernels.get(id).cloned()
    }

    /// Registered ids in sorted order.
    pub fn ids(&self) -> Vec<&str> {
        self.kernels.keys().map(String::as_str).collect()
    }
}
