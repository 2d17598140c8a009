//! The embedded script engine and its value bridge.

use rhai::module_resolvers::DummyModuleResolver;
use rhai::packages::{
    ArithmeticPackage, BasicArrayPackage, BasicIteratorPackage, BasicMapPackage, BasicMathPackage, BasicStringPackage,
    LogicPackage, Package,
};
use rhai::{Array, Dynamic, Engine, EvalAltResult, Map, FLOAT, INT};

/// Operations allowed per script call.
pub const MAX_OPERATIONS: u64 = 1_000_000;

type FnResult<T> = Result<T, Box<EvalAltResult>>;

/// Builds an engine with arithmetic, logic, maths, arrays, maps and strings only.
/// No printing, module imports, `eval`, clocks or host access.
pub fn build_engine() -> Engine {
    let mut engine = Engine::new_raw();
    for lib in [
        ArithmeticPackage::new().as_shared_module(),
        LogicPackage::new().as_shared_module(),
        BasicMathPackage::new().as_shared_module(),
        BasicIteratorPackage::new().as_shared_module(),
        BasicStringPackage::new().as_shared_module(),
        BasicArrayPackage::new().as_shared_module(),
        BasicMapPackage::new().as_shared_module(),
    ] {
        engine.register_global_module(lib);
    }
    engine.set_module_resolver(DummyModuleResolver::new());
    engine.disable_symbol("eval");
    engine.disable_symbol("import");
    engine.disable_symbol("export");
    engine.set_max_operations(MAX_OPERATIONS);
    engine.set_max_call_levels(32);
    engine.set_max_expr_depths(64, 64);
    engine.set_max_string_size(4096);
    engine.set_max_array_size(4096);
    engine.set_max_map_size(256);
    engine.set_optimization_level(rhai::OptimizationLevel::Simple);
    register_helpers(&mut engine);
    engine
}

fn num(d: &Dynamic) -> FnResult<FLOAT> {
    if let Some(f) = d.clone().try_cast::<FLOAT>() {
        Ok(f)
    } else if let Some(i) = d.clone().try_cast::<INT>() {
        Ok(i as FLOAT)
    } else {
        Err(format!("expected a number, found {}", d.type_name()).into())
    }
}

fn nums(a: &Array) -> FnResult<Vec<FLOAT>> {
    a.iter().map(num).collect()
}

fn to_array(v: impl IntoIterator<Item = FLOAT>) -> Array {
    v.into_iter().map(Dynamic::from_float).collect()
}

fn same_len(a: &[FLOAT], b: &[FLOAT]) -> FnResult<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(format!("vector length mismatch: {} vs {}", a.len(), b.len()).into())
    }
}

fn register_helpers(engine: &mut Engine) {
    engine.register_fn("vec_add", |a: Array, b: Array| -> FnResult<Array> {
        let (a, b) = (nums(&a)?, nums(&b)?);
        same_len(&a, &b)?;
        Ok(to_array(a.iter().zip(&b).map(|(x, y)| x + y)))
    });
    engine.register_fn("vec_sub", |a: Array, b: Array| -> FnResult<Array> {
        let (a, b) = (nums(&a)?, nums(&b)?);
        same_len(&a, &b)?;
        Ok(to_array(a.iter().zip(&b).map(|(x, y)| x - y)))
    });
    engine.register_fn("vec_scale", |a: Array, s: Dynamic| -> FnResult<Array> {
        let s = num(&s)?;
        Ok(to_array(nums(&a)?.into_iter().map(|x| x * s)))
    });
    engine.register_fn("norm", |a: Array| -> FnResult<FLOAT> {
        Ok(nums(&a)?.iter().map(|x| x * x).sum::<FLOAT>().sqrt())
    });
    engine.register_fn("norm_xy", |a: Array| -> FnResult<FLOAT> {
        let a = nums(&a)?;
        if a.len() < 2 {
            return Err("norm_xy needs at least two components".into());
        }
        Ok((a[0] * a[0] + a[1] * a[1]).sqrt())
    });
    engine.register_fn("clamp", |x: Dynamic, lo: Dynamic, hi: Dynamic| -> FnResult<FLOAT> {
        let (x, lo, hi) = (num(&x)?, num(&lo)?, num(&hi)?);
        if lo > hi {
            return Err("clamp: lower bound exceeds upper bound".into());
        }
        Ok(x.max(lo).min(hi))
    });
    engine.register_fn("sign", |x: Dynamic| -> FnResult<FLOAT> {
        let x = num(&x)?;
        Ok(if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        })
    });
    engine.register_fn("ema", |prev: Dynamic, raw: Dynamic, alpha: Dynamic| -> FnResult<Dynamic> {
        let alpha = num(&alpha)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err("ema: alpha must lie in [0, 1]".into());
        }
        match (prev.clone().try_cast::<Array>(), raw.clone().try_cast::<Array>()) {
            (Some(p), Some(r)) => {
                let (p, r) = (nums(&p)?, nums(&r)?);
                same_len(&p, &r)?;
                Ok(Dynamic::from_array(to_array(
                    p.iter().zip(&r).map(|(p, r)| alpha * r + (1.0 - alpha) * p),
                )))
            }
            _ => Ok(Dynamic::from_float(alpha * num(&raw)? + (1.0 - alpha) * num(&prev)?)),
        }
    });
}

/// Script value to JSON, for decoding structured script output with serde.
pub fn dynamic_to_json(d: &Dynamic) -> Result<serde_json::Value, String> {
    use serde_json::Value;
    if d.is_unit() {
        return Ok(Value::Null);
    }
    if let Some(b) = d.clone().try_cast::<bool>() {
        return Ok(Value::Bool(b));
    }
    if let Some(i) = d.clone().try_cast::<INT>() {
        return Ok(Value::from(i));
    }
    if let Some(f) = d.clone().try_cast::<FLOAT>() {
        return serde_json::Number::from_f64(f)
            .map(Value::Number)
            .ok_or_else(|| format!("non-finite number {f}"));
    }
    if d.is_string() {
        return Ok(Value::String(d.clone().into_string().map_err(|e| e.to_string())?));
    }
    if let Some(a) = d.clone().try_cast::<Array>() {
        return a.iter().map(dynamic_to_json).collect::<Result<Vec<_>, _>>().map(Value::Array);
    }
    if let Some(m) = d.clone().try_cast::<Map>() {
        let mut out = serde_json::Map::new();
        for (k, v) in m {
            out.insert(k.to_string(), dynamic_to_json(&v)?);
        }
        return Ok(Value::Object(out));
    }
    Err(format!("unsupported value of type {}", d.type_name()))
}

/// Reads a script's action: an array of exactly four finite numbers.
pub fn action_from_dynamic(d: &Dynamic) -> Result<[f64; 4], String> {
    let a = d
        .clone()
        .try_cast::<Array>()
        .ok_or_else(|| format!("get_action must return an array, got {}", d.type_name()))?;
    if a.len() != 4 {
        return Err(format!("get_action must return 4 numbers, got {}", a.len()));
    }
    let mut out = [0.0; 4];
    for (o, v) in out.iter_mut().zip(&a) {
        *o = num(v).map_err(|e| e.to_string())?;
        if !o.is_finite() {
            return Err(format!("get_action returned a non-finite value {o}"));
        }
    }
    Ok(out)
}

pub fn vec3_array(v: &crate::Vec3) -> Dynamic {
    Dynamic::from_array(to_array([v.x, v.y, v.z]))
}

pub fn pair_array(p: (f64, f64)) -> Dynamic {
    Dynamic::from_array(to_array([p.0, p.1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(src: &str) -> Result<Dynamic, Box<EvalAltResult>> {
        build_engine().eval::<Dynamic>(src)
    }

    #[test]
    fn helpers_work() {
        assert_eq!(eval("norm([3.0, 4])").unwrap().as_float().unwrap(), 5.0);
        assert_eq!(eval("norm_xy([3, 4, 12])").unwrap().as_float().unwrap(), 5.0);
        assert_eq!(eval("clamp(5, -2, 2)").unwrap().as_float().unwrap(), 2.0);
        assert_eq!(eval("ema(0.0, 1.0, 0.4)").unwrap().as_float().unwrap(), 0.4);
        let v = eval("vec_sub([1.0, 2.0], vec_scale([1, 1], 0.5))").unwrap();
        assert_eq!(dynamic_to_json(&v).unwrap(), serde_json::json!([0.5, 1.5]));
        assert_eq!(eval("max(1, 2.5)").unwrap().as_float().unwrap(), 2.5);
    }

    #[test]
    fn host_capabilities_are_absent() {
        for src in [
            "timestamp()",
            "sleep(1)",
            "eval(\"1\")",
            "import \"std\" as s; 1",
            "exit()",
            "open_file(\"/etc/passwd\")",
            "parse_json(\"{}\")",
        ] {
            assert!(eval(src).is_err(), "{src} should fail");
        }
    }

    #[test]
    fn runaway_loops_hit_the_budget() {
        let err = eval("let x = 0; loop { x += 1; }").unwrap_err();
        assert!(matches!(*err, EvalAltResult::ErrorTooManyOperations(_)));
    }

    #[test]
    fn action_shape_is_checked() {
        let ok = eval("[1, 2.0, -3, 0]").unwrap();
        assert_eq!(action_from_dynamic(&ok).unwrap(), [1.0, 2.0, -3.0, 0.0]);
        assert!(action_from_dynamic(&eval("[1, 2, 3]").unwrap()).is_err());
        assert!(action_from_dynamic(&eval("[1, 2, 3, \"x\"]").unwrap()).is_err());
        assert!(action_from_dynamic(&eval("42").unwrap()).is_err());
    }
}
