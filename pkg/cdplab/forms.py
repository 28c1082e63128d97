from django import forms


class OpenUnitIntervalMixin:
    """Reject values outside (0, 1) for the listed fields"""

    open_unit_fields = ()

    def clean(self):
        cleaned_data = super().clean()
        for name in self.open_unit_fields:
            value = cleaned_data.get(name)
            if value is not None and not 0.0 < value < 1.0:
                self.add_error(name, "Must lie strictly between 0 and 1.")
        return cleaned_data


class DatasetForm(OpenUnitIntervalMixin, forms.Form):
    """Template set and split"""

    n_templates = forms.IntegerField(min_value=2)
    template_size = forms.IntegerField(min_value=4, max_value=228)
    black_fraction = forms.FloatField()
    train_fraction = forms.FloatField()
    n_reps = forms.IntegerField(min_value=1, help_text="Captures per physical instance and device")

    open_unit_fields = ('black_fraction', 'train_fraction')


class ProfileIdMixin:
    def clean_id(self):
        value = self.cleaned_data['id'].strip()
        if not value or '/' in value or '.' in value:
            raise forms.ValidationError("Profile ids must be non-empty and contain no '/' or '.'.")
        return value


class PrinterForm(ProfileIdMixin, forms.Form):
    """One entry of `printers`"""

    id = forms.CharField(max_length=64)
    dot_gain = forms.FloatField(min_value=0.0)
    instance_noise_sigma = forms.FloatField(min_value=0.0)
    print_blur_sigma = forms.FloatField(min_value=0.0)
    dot_gain_jitter = forms.FloatField(min_value=0.0, max_value=1.0, required=False)
    microstructure_scale = forms.FloatField(min_value=0.0, required=False,
                                            help_text="Correlation length of the microstructure field, 0 for white")

    def clean_instance_noise_sigma(self):
        value = self.cleaned_data['instance_noise_sigma']
        if value <= 0:
            raise forms.ValidationError("Must be > 0; prints need per-instance microstructure.")
        return value


class DeviceForm(ProfileIdMixin, forms.Form):
    """One entry of `devices`"""

    id = forms.CharField(max_length=64)
    psf_sigma = forms.FloatField(min_value=0.0)
    acq_noise_sigma = forms.FloatField(min_value=0.0)
    gamma = forms.FloatField()
    scale_factor = forms.FloatField(min_value=0.25, max_value=4.0)
    shift_jitter_max = forms.IntegerField(min_value=0)
    psf_jitter = forms.FloatField(min_value=0.0, max_value=0.99, required=False)

    def clean_gamma(self):
        value = self.cleaned_data['gamma']
        if value <= 0:
            raise forms.ValidationError("Must be > 0.")
        return value


class AttackForm(OpenUnitIntervalMixin, forms.Form):
    estimator = forms.ChoiceField(choices=[('threshold_otsu', 'Otsu threshold'), ('learned_unet', 'Learned U-Net')])
    source_device = forms.CharField(max_length=64, help_text="Device whose captures the attacker estimates from")
    attacker_printer = forms.CharField(max_length=64, required=False,
                                       help_text="Empty: every printer is attacked with its own profile")
    threshold = forms.FloatField()

    open_unit_fields = ('threshold',)


class AlignForm(forms.Form):
    search_radius = forms.IntegerField(min_value=0)
    peak_floor = forms.FloatField(min_value=-1.0, max_value=1.0)
    margin = forms.IntegerField(min_value=0)
    subpixel = forms.BooleanField(required=False)


class QcForm(OpenUnitIntervalMixin, forms.Form):
    percentile = forms.FloatField(min_value=0.0, max_value=100.0)
    margin = forms.FloatField()
    calibration_templates = forms.IntegerField(min_value=1)
    blur_threshold = forms.FloatField(min_value=0.0, required=False)
    contrast_threshold = forms.FloatField(min_value=0.0, required=False)

    open_unit_fields = ('margin',)


class MetricsForm(forms.Form):
    ssim_window = forms.ChoiceField(choices=[('gaussian', 'Gaussian 11x11, sigma 1.5'), ('uniform', 'Uniform 8x8')])
    k1 = forms.FloatField()
    k2 = forms.FloatField()
    dynamic_range = forms.FloatField()

    def clean(self):
        cleaned_data = super().clean()
        for name in ('k1', 'k2', 'dynamic_range'):
            value = cleaned_data.get(name)
            if value is not None and value <= 0:
                self.add_error(name, "Must be > 0.")
        return cleaned_data


class GeneratorForm(forms.Form):
    depth = forms.IntegerField(min_value=1, max_value=8)
    base_channels = forms.IntegerField(min_value=1)


class DiscriminatorForm(forms.Form):
    n_layers = forms.IntegerField(min_value=1, max_value=6)
    base_channels = forms.IntegerField(min_value=1)


class TrainForm(forms.Form):
    """Loss weights and optimizer settings of the synthesizer"""

    lambda_l1 = forms.FloatField(min_value=0.0)
    adversarial_weight = forms.FloatField(min_value=0.0)
    extra_ssim_weight = forms.FloatField(min_value=0.0)
    extra_l2_weight = forms.FloatField(min_value=0.0)
    epochs = forms.IntegerField(min_value=1)
    batch_size = forms.IntegerField(min_value=1)
    learning_rate = forms.FloatField(min_value=0.0)
    beta1 = forms.FloatField(min_value=0.0, max_value=0.9999)
    beta2 = forms.FloatField(min_value=0.0, max_value=0.999999)
    n_pairs = forms.IntegerField(min_value=1, required=False)
    checkpoint_every = forms.IntegerField(min_value=1)
    estimator_epochs = forms.IntegerField(min_value=1, help_text="Epochs of the learned attack estimator")

    def clean(self):
        cleaned_data = super().clean()
        weights = [cleaned_data.get(name) for name in
                   ('lambda_l1', 'adversarial_weight', 'extra_ssim_weight', 'extra_l2_weight')]
        if all(w is not None for w in weights) and not any(w > 0 for w in weights):
            raise forms.ValidationError("At least one loss weight must be > 0.")
        return cleaned_data


class EvaluateForm(forms.Form):
    n_bins = forms.IntegerField(min_value=2)
    inversion_tolerance = forms.FloatField(min_value=0.0)
    min_gain = forms.FloatField(min_value=0.0)
    gain_below = forms.FloatField(min_value=0.0, max_value=1.0)


class CalibrateForm(forms.Form):
    target_auc_span = forms.JSONField()
    n_templates = forms.IntegerField(min_value=4)
    iterations = forms.IntegerField(min_value=1)
    multiplier_low = forms.FloatField()
    multiplier_high = forms.FloatField(min_value=0.0)

    def clean_target_auc_span(self):
        value = self.cleaned_data['target_auc_span']
        if not (isinstance(value, list) and len(value) == 2
                and all(isinstance(v, (int, float)) and 0.5 <= v <= 1.0 for v in value)
                and value[0] <= value[1]):
            raise forms.ValidationError("Expected [low, high] with 0.5 <= low <= high <= 1.")
        return [float(v) for v in value]

    def clean_multiplier_low(self):
        value = self.cleaned_data['multiplier_low']
        if value <= 0:
            raise forms.ValidationError("Must be > 0; the sweep runs on a log scale.")
        return value

    def clean(self):
        cleaned_data = super().clean()
        low, high = cleaned_data.get('multiplier_low'), cleaned_data.get('multiplier_high')
        if low is not None and high is not None and not low < high:
            self.add_error('multiplier_high', "Must be greater than multiplier_low.")
        return cleaned_data
