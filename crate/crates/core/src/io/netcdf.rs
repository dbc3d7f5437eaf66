//! Classic NetCDF (CDF-1 and CDF-2) access with every numeric variable
//! decoded to `f64`.
//!
//! Packed variables are unpacked with `scale_factor` / `add_offset`, and
//! values equal to `_FillValue` or `missing_value` become NaN so callers can
//! reject them.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use netcdf3::{DataSet, DataType, DataVector, FileReader, FileWriter, Version};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NcVariable {
    pub dims: Vec<String>,
    pub data: ArrayD<f64>,
    pub attrs: BTreeMap<String, NcAttr>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NcAttr {
    Text(String),
    Numbers(Vec<f64>),
}

impl NcVariable {
    pub fn text_attr(&self, name: &str) -> Option<&str> {
        match self.attrs.get(name) {
            Some(NcAttr::Text(s)) => Some(s.as_str()),
            _ => None,
        }
    }

    fn number_attr(&self, name: &str) -> Option<f64> {
        match self.attrs.get(name) {
            Some(NcAttr::Numbers(v)) => v.first().copied(),
            _ => None,
        }
    }
}

/// A fully decoded classic NetCDF file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NcFile {
    /// Dimension name to length, plus the name of the record dimension.
    pub dims: Vec<(String, usize)>,
    pub unlimited: Option<String>,
    pub variables: BTreeMap<String, NcVariable>,
}

fn read_err(e: impl std::fmt::Debug) -> Error {
    Error::Format(format!("netcdf: {e:?}"))
}

fn to_f64(v: DataVector) -> Vec<f64> {
    match v {
        DataVector::I8(d) => d.into_iter().map(f64::from).collect(),
        DataVector::U8(d) => d.into_iter().map(f64::from).collect(),
        DataVector::I16(d) => d.into_iter().map(f64::from).collect(),
        DataVector::I32(d) => d.into_iter().map(f64::from).collect(),
        DataVector::F32(d) => d.into_iter().map(f64::from).collect(),
        DataVector::F64(d) => d,
    }
}

fn attr_value(a: &netcdf3::Attribute) -> NcAttr {
    if a.data_type() == DataType::U8 {
        if let Some(s) = a.get_as_string() {
            return NcAttr::Text(s.trim_end_matches('\0').to_string());
        }
    }
    let nums: Vec<f64> = if let Some(v) = a.get_i8() {
        v.iter().map(|&x| f64::from(x)).collect()
    } else if let Some(v) = a.get_u8() {
        v.iter().map(|&x| f64::from(x)).collect()
    } else if let Some(v) = a.get_i16() {
        v.iter().map(|&x| f64::from(x)).collect()
    } else if let Some(v) = a.get_i32() {
        v.iter().map(|&x| f64::from(x)).collect()
    } else if let Some(v) = a.get_f32() {
        v.iter().map(|&x| f64::from(x)).collect()
    } else {
        a.get_f64().map(<[f64]>::to_vec).unwrap_or_default()
    };
    NcAttr::Numbers(nums)
}

impl NcFile {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let mut reader = FileReader::open_seek_read("memory.nc", Box::new(Cursor::new(bytes))).map_err(read_err)?;
        Self::decode(&mut reader)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut reader = FileReader::open(path)
            .map_err(|e| Error::Format(format!("netcdf {}: {e:?}", path.display())))?;
        Self::decode(&mut reader)
    }

    fn decode(reader: &mut FileReader) -> Result<Self> {
        let ds = reader.data_set();
        let dims = ds.get_dims().iter().map(|d| (d.name(), d.size())).collect();
        let unlimited = ds.get_unlimited_dim().map(|d| d.name());
        let headers: Vec<(String, Vec<String>, Vec<usize>, BTreeMap<String, NcAttr>)> = ds
            .get_vars()
            .into_iter()
            .map(|var| {
                let shape = var.get_dims().iter().map(|d| d.size()).collect();
                let attrs = var
                    .get_attrs()
                    .into_iter()
                    .map(|a| (a.name().to_string(), attr_value(a)))
                    .collect();
                (var.name().to_string(), var.dim_names(), shape, attrs)
            })
            .collect();
        let mut variables = BTreeMap::new();
        for (name, dim_names, shape, attrs) in headers {
            let raw = reader.read_var(&name).map_err(read_err)?;
            let data = ArrayD::from_shape_vec(IxDyn(&shape), to_f64(raw))
                .map_err(|e| Error::Format(format!("netcdf variable `{name}`: {e}")))?;
            let mut v = NcVariable {
                dims: dim_names,
                data,
                attrs,
            };
            v.unpack();
            variables.insert(name, v);
        }
        Ok(Self {
            dims,
            unlimited,
            variables,
        })
    }

    pub fn variable(&self, name: &str) -> Option<&NcVariable> {
        self.variables.get(name)
    }

    /// Writes a CDF-2 (64-bit offset) file with `f64` variables. Variables
    /// whose first dimension is `unlimited` are stored as record variables.
    pub fn write(&self, path: &Path) -> Result<()> {
        let werr = |e: &dyn std::fmt::Debug| Error::Format(format!("netcdf write: {e:?}"));
        let mut ds = DataSet::new();
        for (name, len) in &self.dims {
            if self.unlimited.as_deref() == Some(name.as_str()) {
                ds.set_unlimited_dim(name, *len).map_err(|e| werr(&e))?;
            } else {
                ds.add_fixed_dim(name, *len).map_err(|e| werr(&e))?;
            }
        }
        for (name, v) in &self.variables {
            ds.add_var_f64(name, &v.dims).map_err(|e| werr(&e))?;
            for (an, a) in &v.attrs {
                match a {
                    NcAttr::Text(s) => ds.add_var_attr_string(name, an, s),
                    NcAttr::Numbers(n) => ds.add_var_attr_f64(name, an, n.clone()),
                }
                .map_err(|e| werr(&e))?;
            }
        }
        let mut writer = FileWriter::open(path).map_err(|e| werr(&e))?;
        writer.set_def(&ds, Version::Offset64Bit, 0).map_err(|e| werr(&e))?;
        for (name, v) in &self.variables {
            let data: Vec<f64> = v.data.iter().copied().collect();
            let is_record = v.dims.first().is_some_and(|d| self.unlimited.as_deref() == Some(d.as_str()));
            if is_record {
                let per = v.data.shape()[1..].iter().product::<usize>();
                for (r, chunk) in data.chunks(per.max(1)).enumerate() {
                    writer.write_record_f64(name, r, chunk).map_err(|e| werr(&e))?;
                }
            } else {
                writer.write_var_f64(name, &data).map_err(|e| werr(&e))?;
            }
        }
        writer.close().map_err(|e| werr(&e))?;
        Ok(())
    }
}

impl NcVariable {
    fn unpack(&mut self) {
        let fills: Vec<f64> = ["_FillValue", "missing_value"]
            .iter()
            .filter_map(|k| self.number_attr(k))
            .collect();
        let scale = self.number_attr("scale_factor").unwrap_or(1.0);
        let offset = self.number_attr("add_offset").unwrap_or(0.0);
        let packed = scale != 1.0 || offset != 0.0;
        self.data.mapv_inplace(|x| {
            if fills.contains(&x) {
                f64::NAN
            } else if packed {
                x * scale + offset
            } else {
                x
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NcFile {
        let mut variables = BTreeMap::new();
        let mut attrs = BTreeMap::new();
        attrs.insert("units".to_string(), NcAttr::Text("hours since 1979-01-01".into()));
        variables.insert(
            "time".to_string(),
            NcVariable {
                dims: vec!["time".into()],
                data: ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.0, 1.0, 2.0]).unwrap(),
                attrs,
            },
        );
        variables.insert(
            "z".to_string(),
            NcVariable {
                dims: vec!["time".into(), "lat".into(), "lon".into()],
                data: ArrayD::from_shape_fn(IxDyn(&[3, 2, 4]), |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64),
                attrs: BTreeMap::new(),
            },
        );
        NcFile {
            dims: vec![("time".into(), 3), ("lat".into(), 2), ("lon".into(), 4)],
            unlimited: Some("time".into()),
            variables,
        }
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nc");
        let f = sample();
        f.write(&path).unwrap();
        let back = NcFile::open(&path).unwrap();
        assert_eq!(back, f);
        let from_mem = NcFile::from_bytes(std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(from_mem, f);
    }

    #[test]
    fn fill_values_become_nan() {
        let mut v = NcVariable {
            dims: vec!["x".into()],
            data: ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -32767.0, 3.0]).unwrap(),
            attrs: BTreeMap::new(),
        };
        v.attrs.insert("_FillValue".into(), NcAttr::Numbers(vec![-32767.0]));
        v.attrs.insert("scale_factor".into(), NcAttr::Numbers(vec![0.5]));
        v.attrs.insert("add_offset".into(), NcAttr::Numbers(vec![10.0]));
        v.unpack();
        assert_eq!(v.data[[0]], 10.5);
        assert!(v.data[[1]].is_nan());
        assert_eq!(v.data[[2]], 11.5);
    }

    #[test]
    fn rejects_truncated_and_garbage() {
        assert!(NcFile::from_bytes(Vec::new()).is_err());
        assert!(NcFile::from_bytes(b"CDF\x01".to_vec()).is_err());
        assert!(NcFile::from_bytes(b"HDF\x89garbage-bytes-here".to_vec()).is_err());
    }
}
