// Iterator shims: rayon parallel iterators with the `parallel` feature,
// std iterators without it. Only adapters common to both are used at call
// sites (map, zip, enumerate, for_each, sum, collect, ...).

#[cfg(feature = "parallel")]
pub(crate) use rayon::prelude::*;

macro_rules! cfg_iter {
    ($e:expr) => {{
        #[cfg(feature = "parallel")]
        let it = $e.par_iter();
        #[cfg(not(feature = "parallel"))]
        let it = $e.iter();
        it
    }};
}

macro_rules! cfg_iter_mut {
    ($e:expr) => {{
        #[cfg(feature = "parallel")]
        let it = $e.par_iter_mut();
        #[cfg(not(feature = "parallel"))]
        let it = $e.iter_mut();
        it
    }};
}

macro_rules! cfg_into_iter {
    ($e:expr) => {{
        #[cfg(feature = "parallel")]
        let it = $e.into_par_iter();
        #[cfg(not(feature = "parallel"))]
        let it = $e.into_iter();
        it
    }};
}

macro_rules! cfg_chunks_mut {
    ($e:expr, $size:expr) => {{
        #[cfg(feature = "parallel")]
        let it = $e.par_chunks_mut($size);
        #[cfg(not(feature = "parallel"))]
        let it = $e.chunks_mut($size);
        it
    }};
}

macro_rules! cfg_chunks {
    ($e:expr, $size:expr) => {{
        #[cfg(feature = "parallel")]
        let it = $e.par_chunks($size);
        #[cfg(not(feature = "parallel"))]
        let it = $e.chunks($size);
        it
    }};
}
