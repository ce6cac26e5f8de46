use std::cmp::Ordering;

use super::ast::{BinOp, UnaryOp};
use super::value::{IdGen, Value};

pub(crate) fn unary(op: UnaryOp, v: &Value) -> Result<Value, String> {
    match op {
        UnaryOp::Not => Ok(Value::Bool(!v.truthy())),
        UnaryOp::Neg => match v {
            Value::Int(i) => i.checked_neg().map(Value::Int).ok_or_else(|| "integer overflow in negation".into()),
            Value::Float(f) => Ok(Value::Float(-f)),
            other => Err(format!("cannot negate {}", other.type_name())),
        },
    }
}

fn overflow(op: BinOp) -> String {
    format!("integer overflow in {op}")
}

pub(crate) fn binary(op: BinOp, a: &Value, b: &Value, ids: &IdGen) -> Result<Value, String> {
    use Value::*;
    match op {
        BinOp::Eq => return Ok(Bool(a.guest_eq(b))),
        BinOp::Ne => return Ok(Bool(!a.guest_eq(b))),
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let ord = compare(a, b)?;
            return Ok(Bool(match op {
                BinOp::Lt => ord == Ordering::Less,
                BinOp::Le => ord != Ordering::Greater,
                BinOp::Gt => ord == Ordering::Greater,
                _ => ord != Ordering::Less,
            }));
        }
        BinOp::In => {
            return Ok(Bool(match b {
                List(l) => l.items().iter().any(|x| x.guest_eq(a)),
                Map(m) => match a {
                    Str(k) => m.entries().contains_key(&**k),
                    _ => false,
                },
                Str(s) => match a {
                    Str(sub) => s.contains(&**sub),
                    other => return Err(format!("'in <str>' requires a str, got {}", other.type_name())),
                },
                other => return Err(format!("'in' not supported for {}", other.type_name())),
            }))
        }
        _ => {}
    }
    match (a, b) {
        (Int(x), Int(y)) => {
            let (x, y) = (*x, *y);
            let r = match op {
                BinOp::Add => x.checked_add(y),
                BinOp::Sub => x.checked_sub(y),
                BinOp::Mul => x.checked_mul(y),
                BinOp::Div => {
                    if y == 0 {
                        return Err("division by zero".into());
                    }
                    return Ok(Float(x as f64 / y as f64));
                }
                BinOp::FloorDiv => {
                    if y == 0 {
                        return Err("division by zero".into());
                    }
                    x.checked_div(y).map(|q| if (x % y != 0) && ((x < 0) != (y < 0)) { q - 1 } else { q })
                }
                BinOp::Mod => {
                    if y == 0 {
                        return Err("modulo by zero".into());
                    }
                    x.checked_rem(y).map(|r| if r != 0 && ((r < 0) != (y < 0)) { r + y } else { r })
                }
                _ => unreachable!(),
            };
            r.map(Int).ok_or_else(|| overflow(op))
        }
        (Int(_) | Float(_), Int(_) | Float(_)) => {
            let (x, y) = (num(a), num(b));
            Ok(Float(match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => {
                    if y == 0.0 {
                        return Err("division by zero".into());
                    }
                    x / y
                }
                BinOp::FloorDiv => {
                    if y == 0.0 {
                        return Err("division by zero".into());
                    }
                    (x / y).floor()
                }
                BinOp::Mod => {
                    if y == 0.0 {
                        return Err("modulo by zero".into());
                    }
                    let r = x % y;
                    if r != 0.0 && ((r < 0.0) != (y < 0.0)) {
                        r + y
                    } else {
                        r
                    }
                }
                _ => unreachable!(),
            }))
        }
        (Str(x), Str(y)) if op == BinOp::Add => {
            let mut s = String::with_capacity(x.len() + y.len());
            s.push_str(x);
            s.push_str(y);
            Ok(Value::str(s))
        }
        (Str(x), Int(n)) if op == BinOp::Mul => {
            if *n < 0 || (x.len() as i64).saturating_mul(*n) > 1 << 24 {
                return Err("string repetition out of range".into());
            }
            Ok(Value::str(x.repeat(*n as usize)))
        }
        (List(x), List(y)) if op == BinOp::Add => {
            let mut items = x.items().clone();
            items.extend(y.items().iter().cloned());
            Ok(Value::new_list(ids, items))
        }
        _ => Err(format!("unsupported operand types for {op}: {} and {}", a.type_name(), b.type_name())),
    }
}

fn num(v: &Value) -> f64 {
    match v {
        Value::Int(i) => *i as f64,
        Value::Float(f) => *f,
        _ => f64::NAN,
    }
}

fn compare(a: &Value, b: &Value) -> Result<Ordering, String> {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => Ok(x.cmp(y)),
        (Value::Int(_) | Value::Float(_), Value::Int(_) | Value::Float(_)) => {
            num(a).partial_cmp(&num(b)).ok_or_else(|| "comparison with NaN".into())
        }
        (Value::Str(x), Value::Str(y)) => Ok(x.cmp(y)),
        _ => Err(format!("cannot order {} and {}", a.type_name(), b.type_name())),
    }
}

pub(crate) fn index(base: &Value, idx: &Value) -> Result<Value, String> {
    match (base, idx) {
        (Value::List(l), Value::Int(i)) => {
            let items = l.items();
            let pos = normalize(*i, items.len())?;
            Ok(items[pos].clone())
        }
        (Value::Map(m), Value::Str(k)) => {
            m.entries().get(&**k).cloned().ok_or_else(|| format!("key {:?} not found", &**k))
        }
        (Value::Str(s), Value::Int(i)) => {
            let chars: Vec<char> = s.chars().collect();
            let pos = normalize(*i, chars.len())?;
            Ok(Value::str(chars[pos].to_string()))
        }
        (b, i) => Err(format!("cannot index {} with {}", b.type_name(), i.type_name())),
    }
}

pub(crate) fn set_index(base: &Value, idx: &Value, v: Value) -> Result<(), String> {
    match (base, idx) {
        (Value::List(l), Value::Int(i)) => {
            let pos = normalize(*i, l.items().len())?;
            l.items_mut()[pos] = v;
            Ok(())
        }
        (Value::Map(m), Value::Str(k)) => {
            m.entries_mut().insert(k.to_string(), v);
            Ok(())
        }
        (b, i) => Err(format!("cannot assign into {} with {} index", b.type_name(), i.type_name())),
    }
}

fn normalize(i: i64, len: usize) -> Result<usize, String> {
    let len_i = len as i64;
    let pos = if i < 0 { i + len_i } else { i };
    if pos < 0 || pos >= len_i {
        return Err(format!("index {i} out of range for length {len}"));
    }
    Ok(pos as usize)
}

pub(crate) fn iterate(v: &Value) -> Result<Vec<Value>, String> {
    match v {
        Value::List(l) => Ok(l.items().clone()),
        Value::Map(m) => Ok(m.entries().keys().map(|k| Value::str(k.as_str())).collect()),
        Value::Str(s) => Ok(s.chars().map(|c| Value::str(c.to_string())).collect()),
        other => Err(format!("cannot iterate over {}", other.type_name())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_div_and_mod_follow_floor_semantics() {
        let ids = IdGen::default();
        let r = |op, a, b| binary(op, &Value::Int(a), &Value::Int(b), &ids).unwrap().to_string();
        assert_eq!(r(BinOp::FloorDiv, -7, 2), "-4");
        assert_eq!(r(BinOp::Mod, -7, 3), "2");
        assert_eq!(r(BinOp::Mod, 7, -3), "-2");
        assert_eq!(r(BinOp::FloorDiv, 7, 2), "3");
    }

    #[test]
    fn overflow_is_an_error() {
        let ids = IdGen::default();
        let e = binary(BinOp::Add, &Value::Int(i64::MAX), &Value::Int(1), &ids).unwrap_err();
        assert!(e.contains("overflow"));
        assert!(binary(BinOp::FloorDiv, &Value::Int(i64::MIN), &Value::Int(-1), &ids).is_err());
    }
}
