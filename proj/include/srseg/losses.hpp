#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "srseg/model.hpp"
#include "srseg/tensor.hpp"

namespace srseg {

// Loss weights for the combined objective:
//   total = lambda1 * L_cls + lambda2 * L_seg + lambda3 * L_feat + L_logit
// The logit-distillation term always enters with weight 1.
struct LossWeights {
    double lambda1 = 0.2;  // exit classification weight
    double lambda2 = 0.8;  // exit segmentation weight
    double lambda3 = 1.0;  // feature-distillation weight

    void validate() const {
        if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
            throw std::invalid_argument("loss weights must be >= 0");
    }
};

// Distillation temperature with its annealing policy: tau starts at 1 and
// only ever grows by growth_factor, so it is non-decreasing over a run.
struct Temperature {
    double tau = 1.0;
    double growth_factor = 1.05;
    double trigger_threshold = 0.5;

    void validate() const {
        if (!(tau > 0.0)) throw std::invalid_argument("temperature: tau must be positive");
        if (!(growth_factor >= 1.0)) throw std::invalid_argument("temperature: growth_factor must be >= 1");
        if (!(trigger_threshold >= 0.0)) throw std::invalid_argument("temperature: trigger_threshold must be >= 0");
    }
};

// ============================================================================
// Distillation primitives
// ============================================================================

// Temperature-softened cross-entropy between two aligned feature maps,
// averaged over batch and spatial positions and rescaled by tau^2 so the
// gradient magnitude stays comparable across temperatures:
//   tau^2 * (-1/(B*M)) * sum_j sum_c softmax(t_j/tau)_c * log softmax(s_j/tau)_c
// The teacher is treated as a constant: no gradient flows into it.
template <typename T>
Tensor<T> feature_distill_ce(const Tensor<T>& teacher, const Tensor<T>& student, double tau) {
    if (student.rank() != 4)
        throw std::invalid_argument("feature_distill_ce: student must be 4-d, got " + shape_str(student.shape()));
    if (!student.same_shape(teacher))
        throw std::invalid_argument("feature_distill_ce: teacher " + shape_str(teacher.shape()) + " and student " +
                                    shape_str(student.shape()) + " differ");
    if (!(tau > 0.0))
        throw std::invalid_argument("feature_distill_ce: tau must be positive, got " + std::to_string(tau));
    const T inv_tau = static_cast<T>(1.0 / tau);
    const std::int64_t B = student.dim(0), M = student.dim(2) * student.dim(3);
    Tensor<T> p_teacher = channel_softmax(scale(detach(teacher), inv_tau));
    Tensor<T> logp_student = channel_log_softmax(scale(student, inv_tau));
    Tensor<T> ce = sum(mul(p_teacher, logp_student));
    return scale(ce, static_cast<T>(-tau * tau / static_cast<double>(B * M)));
}

// Same softened cross-entropy on B x C classification logits (a single
// "position" per sample).
template <typename T>
Tensor<T> logit_distill_ce(const Tensor<T>& teacher, const Tensor<T>& student, double tau) {
    if (student.rank() != 2)
        throw std::invalid_argument("logit_distill_ce: student must be 2-d, got " + shape_str(student.shape()));
    if (!student.same_shape(teacher))
        throw std::invalid_argument("logit_distill_ce: teacher " + shape_str(teacher.shape()) + " and student " +
                                    shape_str(student.shape()) + " differ");
    const std::int64_t B = student.dim(0), C = student.dim(1);
    return feature_distill_ce(reshape(teacher, {B, C, 1, 1}), reshape(student, {B, C, 1, 1}), tau);
}

// ============================================================================
// Distillation across exits
// ============================================================================

// Shallow-to-deep feature regulation: the first exit that produces adapted
// features teaches every later one. Returns the sum over student exits;
// per_term, when given, receives one value per student.
template <typename T>
Tensor<T> sr_f_loss(const std::vector<ExitBundle<T>>& bundles, double tau, std::vector<double>* per_term = nullptr) {
    const ExitBundle<T>* teacher = nullptr;
    std::vector<const ExitBundle<T>*> students;
    for (const auto& b : bundles) {
        if (!b.adapted_features) continue;
        if (!teacher) teacher = &b;
        else students.push_back(&b);
    }
    if (!teacher || students.empty())
        throw std::invalid_argument("sr_f_loss: need at least two exits with adapted features, got " +
                                    std::to_string((teacher ? 1 : 0) + students.size()));
    Tensor<T> total = Tensor<T>::scalar(T(0));
    for (const ExitBundle<T>* s : students) {
        Tensor<T> term = feature_distill_ce(*teacher->adapted_features, *s->adapted_features, tau);
        if (per_term) per_term->push_back(static_cast<double>(term.item()));
        total = add(total, term);
    }
    return total;
}

// Deep-to-shallow logit regulation: the last exit with classification
// logits teaches every earlier one. Returns the sum over student exits.
template <typename T>
Tensor<T> sr_l_loss(const std::vector<ExitBundle<T>>& bundles, double tau, std::vector<double>* per_term = nullptr) {
    const ExitBundle<T>* teacher = nullptr;
    std::vector<const ExitBundle<T>*> students;
    for (const auto& b : bundles) {
        if (!b.cls_logits) continue;
        if (teacher) students.push_back(teacher);
        teacher = &b;
    }
    if (!teacher || students.empty())
        throw std::invalid_argument("sr_l_loss: need at least two exits with classification logits, got " +
                                    std::to_string((teacher ? 1 : 0) + students.size()));
    Tensor<T> total = Tensor<T>::scalar(T(0));
    for (const ExitBundle<T>* s : students) {
        Tensor<T> term = logit_distill_ce(*teacher->cls_logits, *s->cls_logits, tau);
        if (per_term) per_term->push_back(static_cast<double>(term.item()));
        total = add(total, term);
    }
    return total;
}

// ============================================================================
// Supervised terms
// ============================================================================

// pixel cross-entropy against the integer mask
template <typename T>
Tensor<T> seg_ce_loss(const Tensor<T>& seg_logits, const std::vector<std::int32_t>& mask) {
    return masked_nll_mean(channel_log_softmax(seg_logits), mask);
}

// multi-label presence BCE against 0/1 targets
template <typename T>
Tensor<T> cls_bce_loss(const Tensor<T>& cls_logits, const std::vector<T>& targets) {
    return bce_with_logits_mean(cls_logits, targets);
}

// ============================================================================
// Combined objective
// ============================================================================

template <typename T>
struct LossBreakdown {
    Tensor<T> total;  // differentiable scalar
    double sr_cls = 0.0;
    double sr_seg = 0.0;
    double sr_f = 0.0;
    double sr_l = 0.0;
    double total_value = 0.0;
    std::vector<double> per_exit_cls, per_exit_seg;  // one entry per supervised exit
    std::vector<double> per_student_sr_f, per_student_sr_l;
};

// Which loss families participate in a training run. Dropping a family
// removes its forward computation entirely, not just its weight.
struct LossToggles {
    bool mea_on = true;   // supervise every exit instead of only the final one
    bool sr_f_on = true;  // shallow-to-deep feature distillation
    bool sr_l_on = true;  // deep-to-shallow logit distillation
};

// Assembles the training objective from one forward pass. With mea_on the
// supervised terms average over every exit that carries the corresponding
// head; without it only the final segmentation is supervised (no
// classification term). The distillation sums switch on their own toggles.
// With everything on this is the canonical combined objective.
template <typename T>
LossBreakdown<T> training_loss(const std::vector<ExitBundle<T>>& bundles, const std::vector<std::int32_t>& mask,
                               const std::vector<T>& labels, const LossWeights& weights, const LossToggles& toggles,
                               double tau) {
    weights.validate();
    std::vector<const ExitBundle<T>*> seg_exits, cls_exits;
    for (const auto& b : bundles) {
        if (b.seg_logits) seg_exits.push_back(&b);
        if (b.cls_logits) cls_exits.push_back(&b);
    }
    if (seg_exits.empty()) throw std::invalid_argument("training_loss: no exit produced segmentation logits");
    if (!toggles.mea_on) {
        seg_exits = {seg_exits.back()};
        cls_exits.clear();  // baseline supervision is the final segmentation alone
    }

    LossBreakdown<T> out;
    Tensor<T> seg_term = Tensor<T>::scalar(T(0));
    for (const ExitBundle<T>* e : seg_exits) {
        Tensor<T> term = seg_ce_loss(*e->seg_logits, mask);
        out.per_exit_seg.push_back(static_cast<double>(term.item()));
        seg_term = add(seg_term, term);
    }
    seg_term = scale(seg_term, T(1) / static_cast<T>(seg_exits.size()));
    out.sr_seg = static_cast<double>(seg_term.item());
    Tensor<T> total = scale(seg_term, static_cast<T>(weights.lambda2));

    if (!cls_exits.empty()) {
        Tensor<T> cls_term = Tensor<T>::scalar(T(0));
        for (const ExitBundle<T>* e : cls_exits) {
            Tensor<T> term = cls_bce_loss(*e->cls_logits, labels);
            out.per_exit_cls.push_back(static_cast<double>(term.item()));
            cls_term = add(cls_term, term);
        }
        cls_term = scale(cls_term, T(1) / static_cast<T>(cls_exits.size()));
        out.sr_cls = static_cast<double>(cls_term.item());
        total = add(total, scale(cls_term, static_cast<T>(weights.lambda1)));
    }

    if (toggles.sr_f_on) {
        Tensor<T> f_term = sr_f_loss(bundles, tau, &out.per_student_sr_f);
        out.sr_f = static_cast<double>(f_term.item());
        total = add(total, scale(f_term, static_cast<T>(weights.lambda3)));
    }
    if (toggles.sr_l_on) {
        Tensor<T> l_term = sr_l_loss(bundles, tau, &out.per_student_sr_l);
        out.sr_l = static_cast<double>(l_term.item());
        total = add(total, l_term);
    }
    out.total = total;
    out.total_value = static_cast<double>(total.item());
    return out;
}

// The full combined objective over all exits: supervised terms on every
// head plus both distillation sums, weighted per LossWeights.
template <typename T>
LossBreakdown<T> overall_sr_loss(const std::vector<ExitBundle<T>>& bundles, const std::vector<std::int32_t>& mask,
                                 const std::vector<T>& labels, const LossWeights& weights, double tau) {
    return training_loss(bundles, mask, labels, weights, LossToggles{}, tau);
}

// ============================================================================
// Temperature schedule
// ============================================================================

// Grows tau once (by growth_factor) if any per-sample, per-channel softened
// adapted-features map spans a range above trigger_threshold, i.e. some map
// is becoming confident enough to warrant flatter distillation targets.
// Runs outside the tape.
template <typename T>
Temperature update_temperature(const Temperature& temp, const std::vector<ExitBundle<T>>& bundles) {
    temp.validate();
    NoGradGuard<T> guard;
    const T inv_tau = static_cast<T>(1.0 / temp.tau);
    for (const auto& bundle : bundles) {
        if (!bundle.adapted_features) continue;
        Tensor<T> p = channel_softmax(scale(*bundle.adapted_features, inv_tau));
        const std::int64_t BC = p.dim(0) * p.dim(1);
        const std::int64_t plane = p.dim(2) * p.dim(3);
        const T* d = p.data().data();
        for (std::int64_t bc = 0; bc < BC; ++bc) {
            const T* m = d + bc * plane;
            T lo = m[0], hi = m[0];
            for (std::int64_t i = 1; i < plane; ++i) {
                lo = std::min(lo, m[i]);
                hi = std::max(hi, m[i]);
            }
            if (static_cast<double>(hi - lo) > temp.trigger_threshold) {
                Temperature grown = temp;
                grown.tau = temp.tau * temp.growth_factor;
                return grown;
            }
        }
    }
    return temp;
}

}  // namespace srseg
