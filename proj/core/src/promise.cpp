#include "oplrp/promise.hpp"

#include <sstream>
#include <stdexcept>

namespace oplrp {

PromiseClass classify_promise_generating(OpKind kind) {
  switch (kind) {
    case OpKind::Add:
    case OpKind::Sum:
    case OpKind::Mean:
      return PromiseClass::strict;
    case OpKind::Cat:
    case OpKind::Stack:
    case OpKind::Unbind:
    case OpKind::Split:
      return PromiseClass::dependent;
    default:
      return PromiseClass::none;
  }
}

std::string_view run_event_name(RunEvent::Type type) {
  switch (type) {
    case RunEvent::Type::visit: return "visit";
    case RunEvent::Type::promise_create: return "promise_create";
    case RunEvent::Type::pre_promise_create: return "pre_promise_create";
    case RunEvent::Type::aggregate: return "aggregate";
    case RunEvent::Type::nest: return "nest";
    case RunEvent::Type::promise_ready: return "promise_ready";
    case RunEvent::Type::promise_complete: return "promise_complete";
    case RunEvent::Type::branch_backward: return "branch_backward";
    case RunEvent::Type::arg_set: return "arg_set";
    case RunEvent::Type::promote: return "promote";
    case RunEvent::Type::stall: return "stall";
    case RunEvent::Type::drain: return "drain";
  }
  return "unknown";
}

template <typename T>
typename PromiseArenaT<T>::Promise* PromiseArenaT<T>::create(NodeId origin, OpKind kind,
                                                             OpAttrs attrs,
                                                             std::size_t num_branches,
                                                             std::optional<TensorT<T>> rout) {
  auto p = std::make_unique<Promise>();
  p->id = static_cast<int>(promises_.size());
  p->origin = origin;
  p->op_kind = kind;
  p->attrs = std::move(attrs);
  p->rout = std::move(rout);
  p->args.resize(num_branches);
  for (std::size_t i = 0; i < num_branches; ++i) {
    auto b = std::make_unique<Branch>();
    b->promise = p.get();
    b->index = static_cast<int>(i);
    p->branches.push_back(std::move(b));
  }
  ++origin_count_;
  ++live_origin_;
  peak_live_origin_ = std::max(peak_live_origin_, live_origin_);
  emit({RunEvent::Type::promise_create, origin, p->id, -1, false});
  promises_.push_back(std::move(p));
  return promises_.back().get();
}

template <typename T>
typename PromiseArenaT<T>::Promise* PromiseArenaT<T>::create_aggregation(NodeId origin,
                                                                         bool promoted) {
  auto p = std::make_unique<Promise>();
  p->id = static_cast<int>(promises_.size());
  p->origin = origin;
  p->op_kind = OpKind::Unsupported;  // aggregation has no op; args pass through
  p->aggregation = true;
  p->promoted = promoted;
  p->args.resize(1);
  auto b = std::make_unique<Branch>();
  b->promise = p.get();
  b->index = 0;
  p->branches.push_back(std::move(b));
  ++aggregation_count_;
  emit({promoted ? RunEvent::Type::aggregate : RunEvent::Type::pre_promise_create, origin,
        p->id, -1, false});
  promises_.push_back(std::move(p));
  return promises_.back().get();
}

template <typename T>
void PromiseArenaT<T>::add_parent(Promise& p, Branch* parent, int out_slot) {
  typename Promise::ParentLink link;
  link.branch = parent;
  link.out_slot = out_slot;
  // Pre-promises withhold the child connection until promotion; that is the
  // asymmetry that lets activations flow up while relevance stays blocked.
  if (p.promoted) {
    parent->children.push_back(&p);
    link.child_wired = true;
  }
  p.parents.push_back(link);
  if (!p.aggregation) emit({RunEvent::Type::nest, p.origin, p.id, parent->index, false});
  if (p.op_outputs_valid) push_to_parent(p, p.parents.back());
}

template <typename T>
void PromiseArenaT<T>::record_step(Branch& b, NodeId node,
                                   std::function<TensorT<T>(const TensorT<T>&)> fwd,
                                   std::function<TensorT<T>(const TensorT<T>&)> bwd) {
  if (b.arg_set)
    throw std::logic_error("promise: branch cannot grow after its activation resolved");
  b.chain.push_back(node);
  b.fwd_chain.push_back(std::move(fwd));
  b.bwd_chain.push_back(std::move(bwd));
}

template <typename T>
void PromiseArenaT<T>::set_arg(Branch& b, std::vector<TensorT<T>> value_pack) {
  if (b.arg_set) {
    std::ostringstream os;
    os << "promise " << b.promise->id << ": branch " << b.index << " resolved twice";
    throw std::logic_error(os.str());
  }
  Promise& p = *b.promise;
  if (!b.fwd_chain.empty()) {
    if (value_pack.size() != 1)
      throw std::logic_error("promise: multi-output values cannot fold through a chain");
    TensorT<T> v = std::move(value_pack[0]);
    // closures recorded walking away from the origin; rebuilding the origin's
    // activation applies them nearest-the-arg first
    for (std::size_t i = b.fwd_chain.size(); i-- > 0;) v = b.fwd_chain[i](v);
    value_pack[0] = std::move(v);
  }
  b.arg_set = true;
  p.args[b.index] = std::move(value_pack);
  emit({RunEvent::Type::arg_set, b.arg_node, p.id, b.index, false});

  bool all = true;
  for (const auto& a : p.args)
    if (!a.has_value()) {
      all = false;
      break;
    }
  if (all) {
    p.ready = true;
    emit({RunEvent::Type::promise_ready, p.origin, p.id, -1, false});
    on_ready(p);
  }
}

template <typename T>
void PromiseArenaT<T>::on_ready(Promise& p) {
  if (p.aggregation) {
    p.op_outputs = *p.args[0];
  } else {
    p.op_outputs = cb_.op_result(p);
  }
  p.op_outputs_valid = true;
  // activations propagate up parent links first; relevance may still wait
  for (auto& link : p.parents) push_to_parent(p, link);
  try_complete(p);
}

template <typename T>
void PromiseArenaT<T>::push_to_parent(Promise& p, typename Promise::ParentLink& link) {
  if (link.pushed || !p.op_outputs_valid) return;
  link.pushed = true;
  if (link.out_slot < 0) {
    set_arg(*link.branch, p.op_outputs);
  } else {
    set_arg(*link.branch, {p.op_outputs.at(static_cast<std::size_t>(link.out_slot))});
  }
}

template <typename T>
void PromiseArenaT<T>::promote(Promise& p) {
  if (p.promoted) {
    std::ostringstream os;
    os << "promise " << p.id << " at node " << p.origin << ": double promotion";
    throw std::logic_error(os.str());
  }
  p.promoted = true;
  for (auto& link : p.parents) {
    if (!link.child_wired) {
      link.branch->children.push_back(&p);
      link.child_wired = true;
    }
  }
  emit({RunEvent::Type::promote, p.origin, p.id, -1, false});
  try_complete(p);
}

template <typename T>
void PromiseArenaT<T>::try_complete(Promise& p) {
  if (p.complete || !p.ready || !p.promoted) return;
  for (const auto& link : p.parents)
    if (!link.branch->rin_set) return;

  const TensorT<T> rout = p.rout.has_value() ? *p.rout : cb_.compute_rout(p);
  std::vector<TensorT<T>> rins;
  if (p.aggregation) {
    rins.push_back(rout);
  } else {
    rins = cb_.compute_rins(p, rout);
    if (rins.size() != p.branches.size())
      throw std::logic_error("promise: rule produced wrong branch count");
  }
  p.complete = true;
  if (!p.aggregation) --live_origin_;
  emit({RunEvent::Type::promise_complete, p.origin, p.id, -1, false});

  // Depth-first per branch: fold the relevance down the chain, then resolve
  // every promise nested beneath that branch before touching the next one.
  for (auto& bp : p.branches) {
    Branch& b = *bp;
    TensorT<T> v = std::move(rins[b.index]);
    for (std::size_t i = 0; i < b.bwd_chain.size(); ++i) v = b.bwd_chain[i](v);
    b.rin = std::move(v);
    b.rin_set = true;
    emit({RunEvent::Type::branch_backward, b.delivered_to, p.id, b.index, false});
    for (Promise* child : b.children) try_complete(*child);
  }
  if (cb_.on_complete) cb_.on_complete(p);
}

template <typename T>
bool PromiseArenaT<T>::all_complete() const {
  for (const auto& p : promises_)
    if (!p->complete) return false;
  return true;
}

template class PromiseArenaT<double>;
template class PromiseArenaT<float>;

}  // namespace oplrp
