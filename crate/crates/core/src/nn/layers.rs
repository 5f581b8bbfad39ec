//! Named parameter handles shared by the networks.

use rand::Rng;

use super::{ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub offset: ParamId,
}

pub(crate) fn add_dense<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<Dense> {
    Ok(Dense {
        w: store.add_glorot(format!("{name}.w"), rows, cols, rng)?,
        b: store.add_filled(format!("{name}.b"), cols, 0.0)?,
    })
}

pub(crate) fn add_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Norm> {
    Ok(Norm {
        gain: store.add_filled(format!("{name}.gain"), width, 1.0)?,
        offset: store.add_filled(format!("{name}.offset"), width, 0.0)?,
    })
}

pub(crate) fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Config(format!("parameter {name} missing from store")))?;
    if store.value(id).shape() != shape {
        return Err(Error::shape(format!(
            "parameter {name} has shape {:?}, expected {shape:?}",
            store.value(id).shape()
        )));
    }
    Ok(id)
}

pub(crate) fn bind_dense<T: Scalar>(store: &ParamStore<T>, name: &str, rows: usize, cols: usize) -> Result<Dense> {
    Ok(Dense {
        w: lookup(store, &format!("{name}.w"), &[rows, cols])?,
        b: lookup(store, &format!("{name}.b"), &[cols])?,
    })
}

pub(crate) fn bind_norm<T: Scalar>(store: &ParamStore<T>, name: &str, width: usize) -> Result<Norm> {
    Ok(Norm {
        gain: lookup(store, &format!("{name}.gain"), &[width])?,
        offset: lookup(store, &format!("{name}.offset"), &[width])?,
    })
}
