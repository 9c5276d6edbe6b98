#pragma once

#include <string>
#include <vector>

#include "cldyn/adam.hpp"
#include "cldyn/rsc.hpp"
#include "cldyn/tasks.hpp"
#include "cldyn/vfn.hpp"

namespace cldyn {

// The semantic transmission chain: fuse, feed the task, compensate, re-fuse,
// feed the task again; trained with the reward-penalty objective against the
// frozen fusion network and frozen tasks.

struct ChainTrace {
  long task_id = 0;
  Tensor fused_pre;        // I_f
  Tensor pred_pre;         // task prediction on I_f
  Tensor task_feat;        // F_d fed back to the compensation module
  FeatureStack compensated;
  Tensor fused_post;       // task-customized fused image
  Tensor pred_post;        // task prediction on the compensated image
  std::vector<SelectionTrace> selections;
};

/// One full pass of the chain for a (sample, task) pair. Performs no
/// parameter update; fusion and task parameters must be frozen.
inline ChainTrace chain_step(const ImagePair& pair, const TaskHandle& task, const VfnParams& vfn,
                             const RscParams& rsc,
                             const std::vector<SelectionTrace>* pinned = nullptr) {
  if (!vfn.frozen) throw ConfigError("chain_step: fusion network must be frozen");
  if (!task.frozen) throw ConfigError("chain_step: task network must be frozen");
  ChainTrace t;
  t.task_id = task.id;
  VfnOutput out = vfn_forward(pair, vfn);
  t.fused_pre = out.fused;
  TaskOutput pre = task_forward(out.fused, task);
  t.pred_pre = pre.prediction;
  t.task_feat = pre.semantic;
  t.compensated = rsc_forward(out.stack, pre.semantic, rsc, pinned, &t.selections);
  t.fused_post = vfn_forward_with_injection(pair, vfn, t.compensated);
  TaskOutput post = task_forward(t.fused_post, task);
  t.pred_post = post.prediction;
  return t;
}

/// Reward: the task loss of the compensated prediction under ground truth.
inline Tensor reward_loss(const Tensor& pred_post, const Tensor& gt, TaskLossKind kind) {
  return task_loss(pred_post, gt, kind);
}

/// Penalty: hinge on regression past the pre-compensation reference, which
/// is treated as a constant (no gradient reaches the reference branch).
inline Tensor penalty_loss(const Tensor& pred_post, const Tensor& pred_pre, const Tensor& gt,
                           TaskLossKind kind) {
  Tensor c_post = task_loss(pred_post, gt, kind);
  Tensor c_pre = detach(task_loss(detach(pred_pre), gt, kind));
  return relu(sub(c_post, c_pre));
}

inline Tensor closed_loop_loss(const Tensor& reward, const Tensor& penalty, double delta) {
  if (delta < 0) throw ConfigError("delta must be >= 0");
  return add(reward, scale(penalty, delta));
}

struct LossBundle {
  double reward = 0.0;
  double penalty = 0.0;
  double closed_loop = 0.0;
  double delta = 5.0;
};

/// One gradient vector per trainable tensor, aligned with the parameter
/// list order.
using GradSet = std::vector<std::vector<double>>;

inline GradSet snapshot_grads(const std::vector<Tensor>& params) {
  GradSet out;
  out.reserve(params.size());
  for (const auto& p : params)
    out.push_back(p.grad().size() == p.data().size() ? p.grad()
                                                     : std::vector<double>(p.data().size(), 0.0));
  return out;
}

/// Plain unweighted sum across tasks (the gradient-conflict mitigation of
/// the original training recipe is an extension point, not implemented).
inline GradSet combine_task_gradients(const std::vector<GradSet>& per_task) {
  if (per_task.empty()) throw ConfigError("combine_task_gradients: no gradient sets");
  GradSet combined = per_task.front();
  for (size_t t = 1; t < per_task.size(); ++t) {
    if (per_task[t].size() != combined.size())
      throw ShapeError("combine_task_gradients: arity mismatch");
    for (size_t i = 0; i < combined.size(); ++i) {
      if (per_task[t][i].size() != combined[i].size())
        throw ShapeError("combine_task_gradients: tensor shape mismatch");
      for (size_t j = 0; j < combined[i].size(); ++j) combined[i][j] += per_task[t][i][j];
    }
  }
  return combined;
}

inline void write_grads(const GradSet& grads, std::vector<Tensor>& params) {
  if (grads.size() != params.size()) throw ShapeError("write_grads: arity mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    params[i].zero_grad();
    auto& g = const_cast<std::vector<double>&>(params[i].grad());
    g = grads[i];
  }
}

/// Frozen per-sample context reused across the training loop: the native
/// forward pass and per-task feedback do not depend on the trainable
/// parameters, so they are computed once. Values are bitwise identical to
/// re-running the chain (asserted in tests).
struct SampleContext {
  FeatureStack stack;                  // constants
  Tensor fused_pre;
  std::vector<Tensor> task_feat;       // per task, constants
  std::vector<Tensor> pred_pre;        // per task
  std::vector<double> loss_pre;        // per task
};

inline SampleContext make_sample_context(const SceneSample& scene,
                                         const std::vector<TaskHandle>& tasks,
                                         const VfnParams& vfn) {
  SampleContext ctx;
  VfnOutput out = vfn_forward(ImagePair{scene.ir, scene.vi}, vfn);
  ctx.fused_pre = detach(out.fused);
  for (auto& t : out.stack.ir) ctx.stack.ir.push_back(detach(t));
  for (auto& t : out.stack.vi) ctx.stack.vi.push_back(detach(t));
  for (const auto& task : tasks) {
    TaskOutput pre = task_forward(ctx.fused_pre, task);
    ctx.task_feat.push_back(detach(pre.semantic));
    ctx.pred_pre.push_back(detach(pre.prediction));
    ctx.loss_pre.push_back(task_loss(pre.prediction, ground_truth_for(scene, task.kind), task.kind).item());
  }
  return ctx;
}

struct EpochRow {
  long epoch = 0;
  long task_id = 0;
  double loss_pre = 0.0;
  double loss_post = 0.0;
  double reward = 0.0;
  double penalty = 0.0;
  double closed_loop = 0.0;
};

struct Stage2Report {
  std::vector<EpochRow> rows;
};

/// Mean pre/post task losses over a held-out scene set (no updates).
struct EvalResult {
  std::vector<double> pre, post;  // per task means
};

inline EvalResult evaluate_compensation(const std::vector<SceneSample>& scenes,
                                        const std::vector<TaskHandle>& tasks, const VfnParams& vfn,
                                        const RscParams& rsc) {
  EvalResult res;
  res.pre.assign(tasks.size(), 0.0);
  res.post.assign(tasks.size(), 0.0);
  for (const auto& scene : scenes) {
    for (size_t ti = 0; ti < tasks.size(); ++ti) {
      ChainTrace tr = chain_step(ImagePair{scene.ir, scene.vi}, tasks[ti], vfn, rsc);
      const Tensor& gt = ground_truth_for(scene, tasks[ti].kind);
      res.pre[ti] += task_loss(tr.pred_pre, gt, tasks[ti].kind).item();
      res.post[ti] += task_loss(tr.pred_post, gt, tasks[ti].kind).item();
    }
  }
  const double n = static_cast<double>(scenes.size());
  for (size_t ti = 0; ti < tasks.size(); ++ti) {
    res.pre[ti] /= n;
    res.post[ti] /= n;
  }
  return res;
}

/// Stage-2 training: per batch, each task contributes one closed-loop
/// gradient set (reward on the batch-mean loss, hinge against the
/// batch-mean pre-compensation loss); the sets are summed and applied with
/// one Adam update.
inline Stage2Report train_rsc(RscParams& rsc, const std::vector<SceneSample>& scenes,
                              const std::vector<TaskHandle>& tasks, const VfnParams& vfn,
                              const RunConfig& cfg) {
  if (scenes.empty()) throw ConfigError("train_rsc: empty scene set");
  if (!vfn.frozen) throw ConfigError("train_rsc: fusion network must be frozen");
  for (const auto& t : tasks)
    if (!t.frozen) throw ConfigError("train_rsc: task networks must be frozen");
  if (rsc.frozen) throw ConfigError("train_rsc: compensation parameters are frozen");

  std::vector<SampleContext> ctx;
  ctx.reserve(scenes.size());
  for (const auto& s : scenes) ctx.push_back(make_sample_context(s, tasks, vfn));

  std::vector<Tensor> params = rsc.trainable();
  Adam opt(params, cfg.stage2_lr);
  Stage2Report report;
  const long n = static_cast<long>(scenes.size());
  const long batch = std::min<long>(cfg.stage2_batch, n);

  for (long epoch = 0; epoch < cfg.stage2_epochs; ++epoch) {
    std::vector<EpochRow> acc(tasks.size());
    long steps = 0;
    for (long start = 0; start < n; start += batch) {
      const long stop = std::min(n, start + batch);
      const double bsz = static_cast<double>(stop - start);
      std::vector<GradSet> per_task;
      for (size_t ti = 0; ti < tasks.size(); ++ti) {
        zero_grad(params);
        Tensor batch_reward;
        double pre_mean = 0.0;
        for (long i = start; i < stop; ++i) {
          SampleContext& c = ctx[static_cast<size_t>(i)];
          FeatureStack comp = rsc_forward(c.stack, c.task_feat[ti], rsc);
          Tensor fused_post = vfn_forward_with_injection(ImagePair{scenes[static_cast<size_t>(i)].ir,
                                                                   scenes[static_cast<size_t>(i)].vi},
                                                         vfn, comp);
          TaskOutput post = task_forward(fused_post, tasks[ti]);
          Tensor c_post = task_loss(post.prediction,
                                    ground_truth_for(scenes[static_cast<size_t>(i)], tasks[ti].kind),
                                    tasks[ti].kind);
          Tensor scaled = scale(c_post, 1.0 / bsz);
          batch_reward = (i == start) ? scaled : add(batch_reward, scaled);
          pre_mean += c.loss_pre[ti] / bsz;
        }
        Tensor penalty = relu(sub(batch_reward, Tensor::scalar(pre_mean)));
        Tensor cl = closed_loop_loss(batch_reward, penalty, cfg.delta);
        const double clv = cl.item();
        if (!std::isfinite(clv))
          throw Error("train_rsc: non-finite closed-loop loss at epoch " + std::to_string(epoch) +
                      " task " + std::to_string(tasks[ti].id));
        backward(cl);
        per_task.push_back(snapshot_grads(params));

        EpochRow& row = acc[ti];
        row.loss_pre += pre_mean;
        row.loss_post += batch_reward.item();
        row.reward += batch_reward.item();
        row.penalty += penalty.item();
        row.closed_loop += clv;
      }
      GradSet combined = combine_task_gradients(per_task);
      write_grads(combined, params);
      opt.step();
      ++steps;
    }
    for (size_t ti = 0; ti < tasks.size(); ++ti) {
      EpochRow row = acc[ti];
      row.epoch = epoch;
      row.task_id = tasks[ti].id;
      const double d = static_cast<double>(steps);
      row.loss_pre /= d;
      row.loss_post /= d;
      row.reward /= d;
      row.penalty /= d;
      row.closed_loop /= d;
      report.rows.push_back(row);
    }
  }
  return report;
}

inline std::string stage2_report_csv(const Stage2Report& report, std::uint32_t config_hash) {
  std::ostringstream os;
  os.precision(17);
  os << "# config_hash=" << config_hash << "\n";
  os << "epoch,task,loss_pre,loss_post,reward,penalty,closed_loop\n";
  for (const auto& r : report.rows)
    os << r.epoch << "," << r.task_id << "," << r.loss_pre << "," << r.loss_post << "," << r.reward
       << "," << r.penalty << "," << r.closed_loop << "\n";
  return os.str();
}

}  // namespace cldyn
